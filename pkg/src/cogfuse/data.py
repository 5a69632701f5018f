"""Feature corpus: file format, validation, folds, normalization, synthesis.

A corpus is a JSON-lines file.  The first line is a meta header::

    {"meta": {"format": "cogfuse/1", "L": 16, "d": 32, "d_a": 24}}

and every following line is one record::

    {"sample_id": ..., "subject_id": ..., "language": "en"|"zh",
     "picture_id": 1|2|3, "label": 0|1, "mmse": float,
     "subject_seq": [[... d floats] x L], "reference_seq": [[...] x L],
     "audio_feat": [... d_a floats]}

Each subject contributes exactly three records (one per picture) that share
language, label and MMSE score.  Token rows are the subject's precomputed
text embeddings; all-zero rows are legal only as trailing padding.  NaN is
tolerated on ingest in ``audio_feat`` alone and is imputed from training
statistics by the normalizer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from .exceptions import (
    ConfigurationError,
    DegenerateInputError,
    DimensionError,
    IntegrityError,
    InvalidValueError,
    ParseError,
    RangeError,
    UsageError,
)

FORMAT_VERSION = "cogfuse/1"
LANGUAGES = ("en", "zh")
PICTURE_IDS = (1, 2, 3)
RECORDS_PER_SUBJECT = 3

_RECORD_KEYS = (
    "sample_id",
    "subject_id",
    "language",
    "picture_id",
    "label",
    "mmse",
    "subject_seq",
    "reference_seq",
    "audio_feat",
)


@dataclass(eq=False)
class FeatureRecord:
    """One picture description: token embeddings, reference, acoustic vector."""

    sample_id: str
    subject_id: str
    language: str
    picture_id: int
    label: int
    mmse: float
    subject_seq: np.ndarray  # (L, d)
    reference_seq: np.ndarray  # (L, d)
    audio_feat: np.ndarray  # (d_a,)


@dataclass
class Corpus:
    records: list[FeatureRecord]
    seq_len: int
    embed_dim: int
    audio_dim: int
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def subject_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.subject_id, None)
        return list(seen)


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _check_token_rows(seq: np.ndarray, what: str, sample_id: str) -> None:
    # all-zero rows may only pad the tail; a zero row before real tokens is
    # indistinguishable from corrupted input
    nonzero = np.abs(seq).sum(axis=1) > 0.0
    if not nonzero.any():
        raise DegenerateInputError(f"{sample_id}: {what} has no nonzero token rows")
    last = int(np.nonzero(nonzero)[0][-1])
    if not nonzero[: last + 1].all():
        raise DegenerateInputError(
            f"{sample_id}: {what} has a zero-norm row before the padding tail"
        )


def validate_record(rec: FeatureRecord, seq_len: int, embed_dim: int, audio_dim: int) -> None:
    """Field-level checks for a single record."""
    if rec.language not in LANGUAGES:
        raise RangeError(f"{rec.sample_id}: language must be one of {LANGUAGES}, got {rec.language!r}")
    if rec.picture_id not in PICTURE_IDS:
        raise RangeError(f"{rec.sample_id}: picture_id must be in {PICTURE_IDS}, got {rec.picture_id}")
    if rec.label not in (0, 1):
        raise RangeError(f"{rec.sample_id}: label must be 0 or 1, got {rec.label}")
    if not np.isfinite(rec.mmse) or not (0.0 <= rec.mmse <= 30.0):
        raise RangeError(f"{rec.sample_id}: mmse must lie in [0, 30], got {rec.mmse}")
    for what, arr, shape in (
        ("subject_seq", rec.subject_seq, (seq_len, embed_dim)),
        ("reference_seq", rec.reference_seq, (seq_len, embed_dim)),
        ("audio_feat", rec.audio_feat, (audio_dim,)),
    ):
        if arr.shape != shape:
            raise DimensionError(f"{rec.sample_id}: {what} has shape {arr.shape}, expected {shape}")
    for what, arr in (("subject_seq", rec.subject_seq), ("reference_seq", rec.reference_seq)):
        if not np.isfinite(arr).all():
            raise InvalidValueError(f"{rec.sample_id}: {what} contains NaN or infinity")
    if np.isinf(rec.audio_feat).any():
        raise InvalidValueError(f"{rec.sample_id}: audio_feat contains infinity")
    _check_token_rows(rec.subject_seq, "subject_seq", rec.sample_id)
    _check_token_rows(rec.reference_seq, "reference_seq", rec.sample_id)


def validate_corpus(corpus: Corpus) -> None:
    """Record checks plus cross-record subject integrity."""
    seen_ids: set[str] = set()
    groups: dict[str, list[FeatureRecord]] = {}
    for rec in corpus.records:
        validate_record(rec, corpus.seq_len, corpus.embed_dim, corpus.audio_dim)
        if rec.sample_id in seen_ids:
            raise IntegrityError(f"duplicate sample_id {rec.sample_id!r}")
        seen_ids.add(rec.sample_id)
        groups.setdefault(rec.subject_id, []).append(rec)
    for subject_id, recs in groups.items():
        if len(recs) != RECORDS_PER_SUBJECT:
            raise IntegrityError(
                f"subject {subject_id!r} has {len(recs)} records, expected {RECORDS_PER_SUBJECT}"
            )
        if sorted(r.picture_id for r in recs) != list(PICTURE_IDS):
            raise IntegrityError(f"subject {subject_id!r} does not cover pictures {PICTURE_IDS}")
        head = recs[0]
        for r in recs[1:]:
            if (r.language, r.label) != (head.language, head.label) or r.mmse != head.mmse:
                raise IntegrityError(
                    f"subject {subject_id!r} has inconsistent language/label/mmse across records"
                )


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def load_corpus(path) -> Corpus:
    records: list[FeatureRecord] = []
    meta: dict | None = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line_no) from exc
            if meta is None:
                if not isinstance(doc, dict) or "meta" not in doc:
                    raise ParseError("first line must be the meta header", line_no)
                meta = doc["meta"]
                if meta.get("format") != FORMAT_VERSION:
                    raise ParseError(
                        f"unsupported corpus format {meta.get('format')!r}, expected {FORMAT_VERSION!r}",
                        line_no,
                    )
                for key in ("L", "d", "d_a"):
                    if not isinstance(meta.get(key), int) or meta[key] < 1:
                        raise ParseError(f"meta field {key!r} must be a positive integer", line_no)
                continue
            missing = [k for k in _RECORD_KEYS if k not in doc]
            if missing:
                raise ParseError(f"record is missing fields {missing}", line_no)
            try:
                records.append(
                    FeatureRecord(
                        sample_id=str(doc["sample_id"]),
                        subject_id=str(doc["subject_id"]),
                        language=str(doc["language"]),
                        picture_id=int(doc["picture_id"]),
                        label=int(doc["label"]),
                        mmse=float(doc["mmse"]),
                        subject_seq=np.asarray(doc["subject_seq"], dtype=np.float64),
                        reference_seq=np.asarray(doc["reference_seq"], dtype=np.float64),
                        audio_feat=np.asarray(doc["audio_feat"], dtype=np.float64),
                    )
                )
            except (TypeError, ValueError) as exc:
                raise ParseError(f"malformed record field ({exc})", line_no) from exc
    if meta is None:
        raise ParseError("empty corpus file: missing meta header", 1)
    corpus = Corpus(
        records=records,
        seq_len=meta["L"],
        embed_dim=meta["d"],
        audio_dim=meta["d_a"],
        provenance={"source": str(path)},
    )
    validate_corpus(corpus)
    return corpus


def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            json.dumps(
                {
                    "meta": {
                        "format": FORMAT_VERSION,
                        "L": corpus.seq_len,
                        "d": corpus.embed_dim,
                        "d_a": corpus.audio_dim,
                    }
                }
            )
            + "\n"
        )
        for rec in corpus.records:
            fh.write(
                json.dumps(
                    {
                        "sample_id": rec.sample_id,
                        "subject_id": rec.subject_id,
                        "language": rec.language,
                        "picture_id": rec.picture_id,
                        "label": rec.label,
                        "mmse": rec.mmse,
                        "subject_seq": rec.subject_seq.tolist(),
                        "reference_seq": rec.reference_seq.tolist(),
                        "audio_feat": rec.audio_feat.tolist(),
                    }
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """Subject-level fold assignment: every record of a subject shares a fold."""

    n_folds: int
    assignment: dict[str, int]
    seed: int

    def fold_of(self, subject_id: str) -> int:
        return self.assignment[subject_id]

    def subject_counts(self) -> list[int]:
        counts = [0] * self.n_folds
        for fold in self.assignment.values():
            counts[fold] += 1
        return counts

    def to_dict(self) -> dict:
        return {"n_folds": self.n_folds, "seed": self.seed, "assignment": dict(self.assignment)}

    @classmethod
    def from_dict(cls, doc: dict) -> "FoldPlan":
        return cls(
            n_folds=int(doc["n_folds"]),
            assignment={str(k): int(v) for k, v in doc["assignment"].items()},
            seed=int(doc["seed"]),
        )


def _subject_cells(records) -> dict[tuple[str, int], list[str]]:
    cells: dict[tuple[str, int], list[str]] = {}
    seen: set[str] = set()
    for rec in records:
        if rec.subject_id in seen:
            continue
        seen.add(rec.subject_id)
        cells.setdefault((rec.language, rec.label), []).append(rec.subject_id)
    return cells


def assign_folds(records, n_folds: int, seed: int) -> dict[str, int]:
    """Stratified subject dealing.

    Subjects are grouped into (language, label) cells, shuffled inside each
    cell by a seeded generator, and dealt onto folds by one round-robin
    cursor that runs on across cells.  The running cursor keeps both the
    per-cell counts and the overall fold sizes within one subject of even.
    """
    cells = _subject_cells(records)
    for key, members in sorted(cells.items()):
        if len(members) < n_folds:
            raise ConfigurationError(
                f"cell {key} has {len(members)} subjects, need at least {n_folds} for {n_folds} folds"
            )
    rng = np.random.default_rng(seed)
    assignment: dict[str, int] = {}
    cursor = 0
    for _, members in sorted(cells.items()):
        members = sorted(members)
        order = rng.permutation(len(members))
        for idx in order:
            assignment[members[idx]] = cursor % n_folds
            cursor += 1
    return assignment


def split_folds(corpus, n_folds: int = 5, seed: int = 42) -> FoldPlan:
    """Build a fold plan from a corpus or a plain record list."""
    if n_folds < 2:
        raise ConfigurationError(f"need at least 2 folds, got {n_folds}")
    records = corpus.records if isinstance(corpus, Corpus) else corpus
    return FoldPlan(n_folds=n_folds, assignment=assign_folds(records, n_folds, seed), seed=seed)


def fold_split(records, plan: FoldPlan, fold: int) -> tuple[list[FeatureRecord], list[FeatureRecord]]:
    """(train, held-out) record lists for one fold index."""
    if not (0 <= fold < plan.n_folds):
        raise ConfigurationError(f"fold {fold} out of range for {plan.n_folds} folds")
    train = [r for r in records if plan.assignment[r.subject_id] != fold]
    held = [r for r in records if plan.assignment[r.subject_id] == fold]
    return train, held


# ---------------------------------------------------------------------------
# audio normalization
# ---------------------------------------------------------------------------


class AudioNormalizer:
    """Per-coordinate z-scoring of audio features with training-fold statistics.

    ``fit`` computes the population mean/SD per coordinate on the training
    split, ignoring NaN; coordinates with zero variance keep scale 1 and are
    listed in ``constant_coords_``.  ``transform`` imputes NaN with the
    training mean (zero after centering) and returns new records; token
    embeddings pass through untouched.  A normalizer fits once: z-scoring is
    not idempotent, so refitting on already-scaled output is refused.
    """

    def __init__(self) -> None:
        self.mean_: np.ndarray | None = None
        self.scale_: np.ndarray | None = None
        self.constant_coords_: list[int] = []

    @property
    def fitted(self) -> bool:
        return self.mean_ is not None

    def fit(self, records) -> "AudioNormalizer":
        if self.fitted:
            raise UsageError("normalizer is already fitted; create a new one to refit")
        records = list(records)
        if not records:
            raise ConfigurationError("cannot fit a normalizer on zero records")
        feats = np.stack([r.audio_feat for r in records])
        with np.errstate(invalid="ignore"):
            mean = np.nanmean(feats, axis=0)
            sd = np.nanstd(feats, axis=0)  # population SD
        mean = np.where(np.isnan(mean), 0.0, mean)
        sd = np.where(np.isnan(sd), 0.0, sd)
        self.constant_coords_ = [int(i) for i in np.nonzero(sd == 0.0)[0]]
        self.mean_ = mean
        self.scale_ = np.where(sd == 0.0, 1.0, sd)
        return self

    def transform_array(self, feats: np.ndarray) -> np.ndarray:
        if not self.fitted:
            raise UsageError("normalizer must be fitted before transform")
        filled = np.where(np.isnan(feats), self.mean_, feats)
        return (filled - self.mean_) / self.scale_

    def transform(self, records) -> list[FeatureRecord]:
        return [replace(r, audio_feat=self.transform_array(r.audio_feat)) for r in records]

    def to_payload(self) -> dict:
        if not self.fitted:
            raise UsageError("cannot serialize an unfitted normalizer")
        return {
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
            "constant_coords": list(self.constant_coords_),
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "AudioNormalizer":
        norm = cls()
        norm.mean_ = np.asarray(payload["mean"], dtype=np.float64)
        norm.scale_ = np.asarray(payload["scale"], dtype=np.float64)
        norm.constant_coords_ = [int(i) for i in payload["constant_coords"]]
        return norm


def fit_apply_normalizer(train_records, records) -> tuple[list[FeatureRecord], AudioNormalizer]:
    """Fit on the training split only, then scale an arbitrary record list."""
    norm = AudioNormalizer().fit(train_records)
    return norm.transform(records), norm


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Configuration of the synthetic feature generator.

    Subject token rows are standard normal with a label-signed mean shift of
    ``text_separation / 2`` along one fixed unit direction; audio vectors get
    the analogous ``audio_separation`` shift along their own direction.
    Reference sequences are drawn once per (language, picture) and shared.
    MMSE is drawn per subject from the class-conditional normal and clamped
    to [0, 30].

    ``mmse_coupling`` routes the given fraction (in SD units) of each
    subject's standardized MMSE residual into the token component along the
    text direction, trading i.i.d. per-token noise for subject-level noise
    so that the marginal token distribution is unchanged.  The residual
    enters with a minus sign: scoring below one's class mean moves the
    tokens further toward the impaired side of the axis, so text position
    tracks cognition monotonically both between and within classes.  With a
    nonzero coupling the text features carry MMSE information beyond class
    membership, which is what makes score regression from text learnable.
    """

    n_mci_subjects: int = 74
    n_control_subjects: int = 55
    zh_subjects: int = 67
    en_subjects: int = 62
    seq_len: int = 16
    embed_dim: int = 32
    audio_dim: int = 24
    text_separation: float = 2.0
    audio_separation: float = 0.0
    mmse_mean_control: float = 28.0
    mmse_sd_control: float = 1.5
    mmse_mean_mci: float = 24.0
    mmse_sd_mci: float = 2.5
    mmse_coupling: float = 0.6
    seed: int = 42

    def __post_init__(self) -> None:
        if self.text_separation < 0 or self.audio_separation < 0:
            raise ConfigurationError("signal separations must be non-negative")
        if not (0.0 <= self.mmse_coupling < 1.0):
            raise ConfigurationError(f"mmse_coupling must lie in [0, 1), got {self.mmse_coupling}")
        if self.mmse_sd_control < 0 or self.mmse_sd_mci < 0:
            raise ConfigurationError("mmse SDs must be non-negative")
        for name in (
            "n_mci_subjects",
            "n_control_subjects",
            "zh_subjects",
            "en_subjects",
            "seq_len",
            "embed_dim",
            "audio_dim",
        ):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.zh_subjects + self.en_subjects != self.n_mci_subjects + self.n_control_subjects:
            raise ConfigurationError(
                "language totals must equal class totals "
                f"({self.zh_subjects}+{self.en_subjects} != {self.n_mci_subjects}+{self.n_control_subjects})"
            )

    def to_dict(self) -> dict:
        return asdict(self)


def _cell_counts(spec: SyntheticSpec) -> dict[tuple[str, int], int]:
    """Deterministic (language, label) subject counts by largest-share rounding."""
    total = spec.n_mci_subjects + spec.n_control_subjects
    zh_mci = round(spec.n_mci_subjects * spec.zh_subjects / total)
    lo = max(0, spec.zh_subjects - spec.n_control_subjects, spec.n_mci_subjects - spec.en_subjects)
    hi = min(spec.zh_subjects, spec.n_mci_subjects)
    zh_mci = min(max(zh_mci, lo), hi)
    return {
        ("zh", 1): zh_mci,
        ("zh", 0): spec.zh_subjects - zh_mci,
        ("en", 1): spec.n_mci_subjects - zh_mci,
        ("en", 0): spec.n_control_subjects - (spec.zh_subjects - zh_mci),
    }


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def generate_synthetic(spec: SyntheticSpec) -> Corpus:
    """Deterministic synthetic corpus; identical spec + seed reproduce the bits."""
    rng = np.random.default_rng(spec.seed)
    u_text = _unit(rng, spec.embed_dim)
    u_audio = _unit(rng, spec.audio_dim)
    references = {
        (lang, pic): rng.standard_normal((spec.seq_len, spec.embed_dim))
        for lang in LANGUAGES
        for pic in PICTURE_IDS
    }

    counts = _cell_counts(spec)
    subjects: list[tuple[str, str, int]] = []  # (subject_id, language, label)
    for lang in LANGUAGES:
        n_mci = counts[(lang, 1)]
        n_all = n_mci + counts[(lang, 0)]
        for i in range(n_all):
            subjects.append((f"{lang}{i + 1:04d}", lang, 1 if i < n_mci else 0))

    beta = spec.mmse_coupling
    resid_sd = np.sqrt(1.0 - beta * beta)
    records: list[FeatureRecord] = []
    for subject_id, lang, label in subjects:
        z = rng.standard_normal()
        if label == 1:
            mmse = spec.mmse_mean_mci + spec.mmse_sd_mci * z
            text_shift = spec.text_separation / 2.0
            audio_shift = spec.audio_separation / 2.0
        else:
            mmse = spec.mmse_mean_control + spec.mmse_sd_control * z
            text_shift = -spec.text_separation / 2.0
            audio_shift = -spec.audio_separation / 2.0
        mmse = float(np.clip(mmse, 0.0, 30.0))
        for pic in PICTURE_IDS:
            eps = rng.standard_normal((spec.seq_len, spec.embed_dim))
            # minus: scoring below the class mean moves tokens further toward
            # the impaired side, the same axis the class shift lives on
            along = rng.standard_normal(spec.seq_len) * resid_sd - beta * z + text_shift
            # replace the component along u_text so the marginal stays N(shift, 1)
            tokens = eps + np.outer(along - eps @ u_text, u_text)
            audio = rng.standard_normal(spec.audio_dim) + audio_shift * u_audio
            records.append(
                FeatureRecord(
                    sample_id=f"{subject_id}-p{pic}",
                    subject_id=subject_id,
                    language=lang,
                    picture_id=pic,
                    label=label,
                    mmse=mmse,
                    subject_seq=tokens,
                    reference_seq=references[(lang, pic)].copy(),
                    audio_feat=audio,
                )
            )

    corpus = Corpus(
        records=records,
        seq_len=spec.seq_len,
        embed_dim=spec.embed_dim,
        audio_dim=spec.audio_dim,
        provenance={"kind": "synthetic", "seed": spec.seed, "spec": spec.to_dict()},
    )
    validate_corpus(corpus)
    return corpus
