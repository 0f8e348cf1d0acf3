"""Quantized Winograd convolution protocols for two-party secure inference."""

from .costs import CostModel, DEFAULT_LAMBDA
from .ledger import CommLedger, LedgerEntry, Phase
from .protocols import BitImportance, default_importance
from .qtensor import QTensor, QuantParams, dequantize, quantize, ring_reduce
from .sharing import PartyId, Share, SharePair, reconstruct, share, share_pair

__version__ = "0.1.0"

__all__ = [
    "BitImportance", "CommLedger", "CostModel", "DEFAULT_LAMBDA",
    "LedgerEntry", "PartyId", "Phase", "QTensor", "QuantParams",
    "Share", "SharePair", "default_importance", "dequantize", "quantize",
    "reconstruct", "ring_reduce", "share", "share_pair",
]
