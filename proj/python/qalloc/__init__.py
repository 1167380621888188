"""Per-layer bit-width allocation for uniform weight quantization."""

from ._qalloc import (
    ALPHA,
    BitAllocation,
    Comparison,
    Curve,
    CurvePoint,
    Dataset,
    FormatError,
    LayerProfile,
    MatchedPoint,
    Model,
    allocate_adaptive,
    allocate_equal,
    allocate_sqnr,
    compare,
    curves_to_csv,
    evaluate_accuracy,
    expected_noise_power,
    gen_dataset,
    gen_model,
    load_dataset,
    load_model,
    load_profiles,
    quantize_model,
    quantize_uniform,
    run_pipeline,
    save_dataset,
    save_model,
    save_profiles,
    sweep,
)

__all__ = [name for name in dir() if not name.startswith("_")]
