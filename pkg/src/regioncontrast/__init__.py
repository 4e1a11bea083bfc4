"""Region-contrastive pretraining of tiny segmentation networks.

Pipeline: unsupervised superpixel-style regions (greedy graph merging) →
elastic positive pairs → localized + global contrastive pretraining on a
from-scratch float64 autodiff engine → Dice fine-tuning of a fused
segmenter — all on synthetic organ phantoms, with every loss and gradient
independently checkable.
"""

from .autodiff import (Tape, Tensor, backward, finite_diff_check, forward_op)
from .checkpoint import (load_checkpoint, load_model_checkpoint,
                         save_checkpoint, save_model_checkpoint)
from .clustering import KMeansResult, kmeans, cluster_purity
from .config import DataConfig, RunConfig, TrainConfig, load_run_config
from .elastic import (DisplacementField, ElasticParams, elastic_pair,
                      gen_field, warp_image, warp_labels)
from .felzenszwalb import FelzParams, felzenszwalb_segment
from .images import Image, RegionMap, gaussian_smooth, region_sizes
from .losses import (GlobalBatch, SampleMeanSet, build_sample_mean_set,
                     dice_loss, global_infonce, local_contrastive_loss,
                     one_hot, sample_region_mean, softmax_channels)
from .netpbm import (read_pgm, read_region_pgm, write_pgm, write_ppm,
                     write_region_pgm)
from .networks import (FusionSegmenter, GlobalEncoder, LocalUNet,
                       forward_global, forward_local)
from .optim import Adam, SgdMomentum, opt_step
from .overlay import render_overlay
from .phantoms import PhantomConfig, gen_phantom, gen_synthetic_dataset
from .training import (DiceReport, evaluate_dice, finetune, pretrain_global,
                       pretrain_local, write_history_jsonl)

__version__ = "0.1.0"
