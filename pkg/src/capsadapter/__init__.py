"""Training-free CLIP adaptation with caption-based multimodal support sets."""

__version__ = "0.1.0"

from .features import (
    FeatureMatrix,
    OneHotLabels,
    build_classifier,
    build_onehot,
    load_cache,
    normalize_rows,
    save_cache,
)
from .kernels import (
    HyperParams,
    affinity,
    f_variant_logits,
    kl_matrix,
    m_adapter_logits,
    multimodal_affinity,
    rescale_phi,
    signatures,
    tipx_logits,
    zeroshot_logits,
)
from .search import GridSpec, SearchResult, SupportCache, make_grid, search
from .evaluate import EvalReport, emit_report, per_class_accuracy, support_similarity, top1_accuracy
