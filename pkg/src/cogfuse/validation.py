"""Input validation helpers shared by the estimators and the CLI."""

from __future__ import annotations

from .data import FeatureRecord, validate_record
from .exceptions import ConfigurationError, DimensionError
from .models import TASKS, VARIANTS


def check_records(
    records,
    seq_len: int | None = None,
    embed_dim: int | None = None,
    audio_dim: int | None = None,
) -> list[FeatureRecord]:
    """Validate a record collection and return it as a list.

    Dimensions left as None are inferred from the first record; every
    record must then agree with them.
    """
    records = list(records)
    if not records:
        raise ConfigurationError("need at least one record")
    first = records[0]
    if seq_len is None:
        seq_len = first.subject_seq.shape[0]
    if embed_dim is None:
        embed_dim = first.subject_seq.shape[1]
    if audio_dim is None:
        audio_dim = first.audio_feat.shape[0]
    for rec in records:
        validate_record(rec, seq_len, embed_dim, audio_dim)
    return records


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ConfigurationError(
            f"unknown variant {variant!r}, expected one of {sorted(VARIANTS)}"
        )
    return variant


def check_task(task: str) -> str:
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}, expected one of {sorted(TASKS)}")
    return task


def check_positive_int(value, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
    return value


def check_dims_match(records, seq_len: int, embed_dim: int, audio_dim: int) -> None:
    """Raise if any record disagrees with the stated feature dimensions."""
    for rec in records:
        if rec.subject_seq.shape != (seq_len, embed_dim):
            raise DimensionError(
                f"record {rec.sample_id}: subject_seq has shape {rec.subject_seq.shape}, "
                f"expected {(seq_len, embed_dim)}"
            )
        if rec.audio_feat.shape != (audio_dim,):
            raise DimensionError(
                f"record {rec.sample_id}: audio_feat has shape {rec.audio_feat.shape}, "
                f"expected {(audio_dim,)}"
            )
