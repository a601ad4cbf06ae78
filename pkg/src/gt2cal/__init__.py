"""General type-2 fuzzy regression with calibrated prediction intervals."""

from .calibration import (
    CalibrationResult,
    CalibrationTable,
    SearchConfig,
    build_lookup_table,
    calibrate_search,
    coverage_at_alpha,
    export_calibration_curve,
    lookup_alpha,
    picp,
    pinaw,
    search_alpha,
)
from .core import (
    ALPHA_MIN,
    DEFAULT_PLANES,
    AlphaLevel,
    FiringIntervals,
    ModelParams,
    TypeReducedSet,
    km_type_reduce,
    predict,
    predict_batch,
    trs_batch,
)
from .errors import (
    DegenerateFiringError,
    DivergenceError,
    FlatCurveError,
    SchemaError,
)
from .harness import (
    DatasetSplit,
    ExperimentReport,
    NormalizationStats,
    format_report,
    load_csv,
    load_model,
    rmse,
    run_pipeline,
    save_model,
    split,
    synthetic_heteroscedastic,
)
from .training import RawParams, TrainConfig, TrainResult, train

__version__ = "0.1.0"
