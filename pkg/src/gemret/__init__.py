"""Image retrieval with trainable generalized-mean pooling."""
from .backbone import TinyFCN, forward, backward, resize_max_side, load_precomputed, save_tensor
from .loss import LossConfig, contrastive_loss, contrastive_grad, triplet_loss
from .mining import (MiningConfig, TrainingTuple, TupleMiner, VisibilityGraph,
                     build_epoch_tuples, load_graph, save_graph)
from .numerics import finite_diff_grad, inner_product, inv_sqrt_psd, l2_normalize, sym_eig
from .pooling import PoolingConfig, extract_descriptor, gem_pool, mac_pool, spoc_pool
from .retrieval import (DescriptorIndex, QEConfig, alpha_qe, average_precision, average_qe,
                        mean_average_precision, multiscale_descriptor, search)
from .trainer import TrainConfig, fit, lr_at_epoch, load_checkpoint, save_checkpoint
from .whitening import LabeledPairSet, apply_whitening, learn_lw, learn_pcaw

__version__ = "0.1.0"
