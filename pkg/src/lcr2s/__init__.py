"""Teacher-student cross-modal identity matching at desk scale.

A small numpy-backed lab: a reverse-mode tensor core, synthetic multi-view
identity data, two-stage toy encoders, multi-head attentional fusion over
same-identity support sets, projection-matching and distillation losses,
staged Adam training, and retrieval metrics.
"""

from .data import (Batch, Dataset, Instance, SamplerConfig, SupportSet,
                   SyntheticConfig, build_support_set, generate_synthetic,
                   load_features, sample_pk_batch, save_features)
from .encoders import EncoderParams, StageFeatures, encode, init_encoder
from .losses import (CmpmConfig, LossWeights, StudentFeatures,
                     TeacherFeatures, cmpm_loss, cr_loss, cross_stage_cmpm,
                     kd_feature_loss, kd_relation_loss, multi_stage_cmpm,
                     ranking_loss, student_loss, student_ms_cmpm,
                     teacher_loss)
from .metrics import (MetricsReport, cosine_similarity_matrix, evaluate,
                      mean_ap, rank_k)
from .mhaf import MhafParams, init_mhaf, mhaf_fuse, mhaf_fuse_batch
from .tensor import Tensor, backward, finite_diff_check, grad
from .training import (AdamState, Checkpoint, LrSchedule, TrainConfig,
                       adam_step, load_checkpoint, lr_at, save_checkpoint,
                       train_student, train_teacher)

__version__ = "0.1.0"
