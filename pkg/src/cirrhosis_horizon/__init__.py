"""Incident cirrhosis prediction on fatty-liver EHR extracts.

Modules, in pipeline order: ``ehr`` (extract types and CSV I/O),
``terminology`` (CCS, Charlson, RUCC), ``cohort``, ``features``,
``fibrosis`` (FIB-4/FIB-5), ``gbdt`` (boosted trees), ``stats``,
``synth`` (synthetic extracts) and ``pipeline`` (the CLI stages).
"""

from ._version import __version__
from .cohort import CohortAssignment, CohortSpec, build_cohort
from .ehr import ClinicalRecordSet, load_record_set, write_record_set
from .features import FeatureMatrix, assemble_matrix
from .fibrosis import SerumPanel, fib4, fib5
from .gbdt import GbdtModel, GbdtParams, predict, train
from .stats import roc_auc, stratified_split
from .synth import default_config, generate

__all__ = [
    "__version__",
    "ClinicalRecordSet",
    "load_record_set",
    "write_record_set",
    "CohortSpec",
    "CohortAssignment",
    "build_cohort",
    "FeatureMatrix",
    "assemble_matrix",
    "SerumPanel",
    "fib4",
    "fib5",
    "GbdtParams",
    "GbdtModel",
    "train",
    "predict",
    "roc_auc",
    "stratified_split",
    "default_config",
    "generate",
]
