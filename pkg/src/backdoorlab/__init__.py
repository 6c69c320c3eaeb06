"""Attention-guided, QoE-constrained backdoor attacks on small image
classifiers, plus a defense evaluation harness."""

from .attention import (AttentionMap, Mask, attention_map, baseline_mask,
                        mask_from_map, select_representative_map,
                        target_class_mask, train_ran)
from .config import AttackConfig, ExperimentConfig, QoEWeights
from .data import (ImageDataset, PoisonPlan, TriggerSpec, apply_trigger,
                   build_poisoned_set, load_dataset, make_poison_plan,
                   make_synthetic, resize_bilinear, resize_dataset)
from .errors import (BackdoorLabError, ConfigError, DataError, ModelError,
                     OptimizationError, TrainingDiverged)
from .injection import (CoOptRecord, CoOptResult, alternating_retrain_round,
                        co_optimize, run_ablation)
from .metrics import (MetricRecord, SSIMParams, append_records, asr, cda,
                      conv_feature_fn, lpips_proxy, ssim, ssim_torch)
from .models import (ModelHandle, TrainHyper, build_victim, capture_activations,
                     evaluate, load_checkpoint, mhsa_forward, predict,
                     save_checkpoint, set_determinism, train_clean)
from .trigger import (NeuronHandle, neuron_boost, optimize_trigger, qoe_loss,
                      select_neuron)

__version__ = "0.1.0"
