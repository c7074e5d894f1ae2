from .aggregation import BatchGradient, Preconditioner, cbp_scale, merge_adabatch, merge_minibatch, merge_reconditioned
from .losses import L2Metric, LossKind
from .parallel_engine import ParallelConfig, SharedModel, hogwild_train, wild_train
from .sgd_engine import AdagradConfig, SgdConfig, max_stable_step, train
from .sparse_core import Dataset, Example, FeatureStats, SparseVector, gen_synthetic, parse_libsvm
from .svrg_engine import SvrgConfig, reference_optimum, svrg_train
