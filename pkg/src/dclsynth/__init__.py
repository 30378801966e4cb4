"""Unpaired synthetic-to-real depth synthesis with differential contrastive
learning, plus the desk-scale transfer-evaluation harness around it."""

from .depth_core import (CameraIntrinsics, DepthMap, NormalMap, PointCloud,
                         RgbImage, backproject, hole_fraction,
                         normals_from_depth, read_depth, write_depth)
from .scenegen import (DomainConfig, NoiseModel, Sample, Scene,
                       apply_sensor_noise, build_dataset, generate_scene,
                       render)
from .nn_core import ModelConfig, ModelSet, build_models, forward_synthesis
from .dcl_losses import (LocationPairSample, LossBreakdown, differential,
                         infonce, loss_adv, loss_dc, loss_idt, loss_total,
                         project, sample_pairs)
from .dcl_trainer import TrainConfig, synthesize_dataset, train, train_step
from .tasks import TaskConfig, TaskModel, evaluate_task, finetune, train_task
from .metrics import MetricReport, depth_metrics, normal_metrics

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
