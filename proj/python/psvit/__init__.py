"""PSViT lab: token pooling, attention sharing, analytical cost model and
single-path supernet search, backed by the C++ core."""

try:
    from ._psvit import *  # noqa: F401,F403  (installed wheel layout)
    from ._psvit import __doc__ as _core_doc  # noqa: F401
except ImportError:  # build-tree layout: module sits on PYTHONPATH directly
    from _psvit import *  # noqa: F401,F403

__all__ = [
    "presets",
    "preset_genotype",
    "validate_genotype",
    "count_flops",
    "count_params",
    "attention_compute_share",
    "search_space_size",
    "pooled_tokens",
    "attention_correlation",
    "model_logits",
    "generate_dataset",
]
