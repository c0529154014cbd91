"""Missing-value imputation for tabular data with a re-masked transformer autoencoder.

The autodiff engine (:mod:`remasker.tensor`), model blocks (:mod:`remasker.nn`),
re-masking (:mod:`remasker.masking`) and the imputer (:mod:`remasker.imputer`)
are pure numpy. :mod:`remasker.missingness`, :mod:`remasker.metrics`,
:mod:`remasker.baselines`, :mod:`remasker.data` and :mod:`remasker.experiment`
supply the benchmarking apparatus.
"""

from .data import TabularDataset, load_csv, normalize, denormalize
from .imputer import RemaskerConfig, RemaskerModel, TrainingLog, fit, impute
from .missingness import MissingnessSpec, simulate

__version__ = "0.1.0"

__all__ = [
    "TabularDataset", "load_csv", "normalize", "denormalize",
    "RemaskerConfig", "RemaskerModel", "TrainingLog", "fit", "impute",
    "MissingnessSpec", "simulate",
]
