"""Multitask pix2pix: translate one image into several aligned output images."""
from .data import (PairedSample, DatasetIndex, FoldSplit, load_manifest, load_sample,
                   encode_labels, decode_mask, augment_dataset, subject_kfold)
from .models import (SchemeConfig, build_generator, build_discriminator, generator_forward,
                     discriminator_forward, count_parameters, receptive_field)
from .losses import LossBreakdown, generator_loss, discriminator_loss
from .trainer import (TrainConfig, TrainState, Checkpoint, init_state, train_step, train, infer,
                      save_checkpoint, load_checkpoint)
from .metrics import (confusion_areas, dice, jaccard, fnr, fpr, rmse, mssim, summary_stats,
                      paired_ttest)

__version__ = "0.1.0"
