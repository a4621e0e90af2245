"""qxkit: group-wise 4-bit weight quantization with learned codebooks."""
from ._backend import BACKEND
from .actquant import fake_quant_int8, int8_rtn_per_token, migrate_scales
from .codebook import Codebook, build_codebook, learn_histograms, lloyd_max
from .codecs import decode, encode, q4x_encode, q40_encode, q4k_encode
from .container import read_container, write_container
from .errors import InvariantError, QxError
from .evaluation import QuantReport, compare_codecs, frobenius_error
from .selector import attention_discrepancy, decide_layer, outlier_score, select_model
from .tensor import WeightMatrix, compute_stats, load_manifest, save_manifest

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Codebook", "InvariantError", "QuantReport", "QxError", "WeightMatrix",
    "attention_discrepancy", "build_codebook", "compare_codecs", "compute_stats", "decide_layer",
    "decode", "encode", "fake_quant_int8", "frobenius_error", "int8_rtn_per_token",
    "learn_histograms", "lloyd_max", "load_manifest", "migrate_scales", "outlier_score",
    "q40_encode", "q4k_encode", "q4x_encode", "read_container", "save_manifest",
    "select_model", "write_container",
]
