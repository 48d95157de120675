"""Entropy coding, delta records and record chains."""
from .chain import Chain, chain_append, chain_restore, chain_stats
from .delta import DeltaRecord, Scheme, decode_delta_record, delta_apply, delta_compute, encode_delta_record

__all__ = [
    "Chain",
    "DeltaRecord",
    "Scheme",
    "chain_append",
    "chain_restore",
    "chain_stats",
    "decode_delta_record",
    "delta_apply",
    "delta_compute",
    "encode_delta_record",
]
