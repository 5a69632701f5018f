"""Shared fixtures: hand-built records and a small planted-signal corpus."""

import numpy as np
import pytest

from cogfuse.data import FeatureRecord, SyntheticSpec, generate_synthetic


def build_record(
    sample_id="s0001-p1",
    subject_id="s0001",
    language="en",
    picture_id=1,
    label=0,
    mmse=28.0,
    seq_len=4,
    embed_dim=6,
    audio_dim=5,
    rng=None,
    subject_seq=None,
    reference_seq=None,
    audio_feat=None,
):
    rng = rng if rng is not None else np.random.default_rng(0)
    if subject_seq is None:
        subject_seq = rng.standard_normal((seq_len, embed_dim))
    if reference_seq is None:
        reference_seq = rng.standard_normal((seq_len, embed_dim))
    if audio_feat is None:
        audio_feat = rng.standard_normal(audio_dim)
    return FeatureRecord(
        sample_id=sample_id,
        subject_id=subject_id,
        language=language,
        picture_id=picture_id,
        label=label,
        mmse=mmse,
        subject_seq=np.asarray(subject_seq, dtype=np.float64),
        reference_seq=np.asarray(reference_seq, dtype=np.float64),
        audio_feat=np.asarray(audio_feat, dtype=np.float64),
    )


def build_subject(subject_id, language, label, mmse, rng, seq_len=4, embed_dim=6, audio_dim=5):
    """All three picture records of one subject."""
    return [
        build_record(
            sample_id=f"{subject_id}-p{pic}",
            subject_id=subject_id,
            language=language,
            picture_id=pic,
            label=label,
            mmse=mmse,
            seq_len=seq_len,
            embed_dim=embed_dim,
            audio_dim=audio_dim,
            rng=rng,
        )
        for pic in (1, 2, 3)
    ]


@pytest.fixture
def record_factory():
    return build_record


@pytest.fixture
def subject_factory():
    return build_subject


@pytest.fixture(scope="session")
def small_corpus():
    """24 subjects, both signals planted, desk-scale dims; shared read-only."""
    spec = SyntheticSpec(
        n_mci_subjects=12,
        n_control_subjects=12,
        zh_subjects=12,
        en_subjects=12,
        seq_len=8,
        embed_dim=16,
        audio_dim=8,
        text_separation=2.0,
        audio_separation=1.0,
        seed=7,
    )
    return generate_synthetic(spec)
