"""Model variants for screening from text-embedding and acoustic features.

Six variants share a small set of parts:

``text``
    route by language -> transformer encoder over the subject's token
    sequence -> mean-pool -> MLP head.
``similarity``
    cosine-similarity matrix between subject and reference sequences,
    flattened row-major into one vector -> shared MLP head (no encoder,
    no routing).
``combination``
    subject and reference sequences summed elementwise, then the text path.
``combined_similarity``
    similarity matrix rows projected into embedding space by a learned
    linear map and added to the subject sequence, then the text path.
``audio``
    one shared MLP head over the acoustic feature vector, no language
    routing.
``multimodal``
    penultimate features of a trained text-family branch and a trained
    audio branch, concatenated into a fusion MLP head.  Branch parameters
    are frozen unless joint fine-tuning is explicitly enabled.

Language-routed variants keep fully disjoint parameter sets per language;
classification and regression never share parameters (the task fixes the
output width at build time).
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .exceptions import ConfigurationError, DimensionError, RoutingError

VARIANTS = ("text", "similarity", "combination", "combined_similarity", "audio", "multimodal")
TEXT_VARIANTS = ("text", "combination", "combined_similarity")
TASKS = ("cls", "reg")
LANGUAGES = ("en", "zh")

CHECKPOINT_FORMAT = "cogfuse-checkpoint/1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters shared by all variants."""

    variant: str = "text"
    task: str = "cls"
    seq_len: int = 16
    embed_dim: int = 32
    n_heads: int = 4
    audio_dim: int = 24
    hidden: tuple[int, ...] = (64, 16)
    encoder_layers: int = 2
    ffn_mult: int = 4
    text_branch: str = "combined_similarity"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}, expected one of {TASKS}")
        if self.text_branch not in TEXT_VARIANTS:
            raise ConfigurationError(
                f"multimodal text branch must be a text-family variant, got {self.text_branch!r}"
            )
        for name in ("seq_len", "embed_dim", "n_heads", "audio_dim", "encoder_layers", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigurationError(
                f"n_heads {self.n_heads} must divide embed_dim {self.embed_dim}"
            )
        self.hidden = tuple(int(w) for w in self.hidden)

    @property
    def out_dim(self) -> int:
        return 2 if self.task == "cls" else 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class LanguageRoute:
    """Per-language parameter bundle of a routed text-family model."""

    encoder: nn.TransformerEncoderStack
    head: nn.MlpHead
    proj: nn.Linear | None = None  # similarity-row projection, combined_similarity only

    def named_params(self, prefix: str) -> dict[str, Tensor]:
        out = self.encoder.named_params(f"{prefix}.encoder")
        if self.proj is not None:
            out.update(self.proj.named_params(f"{prefix}.proj"))
        out.update(self.head.named_params(f"{prefix}.head"))
        return out


def _require_single_language(records) -> str:
    langs = {r.language for r in records}
    unknown = langs.difference(LANGUAGES)
    if unknown:
        raise RoutingError(f"no parameter route for language {sorted(unknown)}")
    if len(langs) != 1:
        raise RoutingError(f"routed forward needs a single-language batch, got {sorted(langs)}")
    return next(iter(langs))


def _stack(records, attr: str) -> Tensor:
    return Tensor(np.stack([getattr(r, attr) for r in records]))


class RoutedTextModel:
    """text / combination / combined_similarity: per-language encoder + head."""

    language_routed = True

    def __init__(self, cfg: ModelConfig, seed: int):
        if cfg.variant not in TEXT_VARIANTS:
            raise ConfigurationError(f"RoutedTextModel cannot build variant {cfg.variant!r}")
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.routes: dict[str, LanguageRoute] = {}
        for lang in LANGUAGES:
            encoder = nn.TransformerEncoderStack(
                cfg.embed_dim, cfg.n_heads, cfg.encoder_layers, cfg.ffn_mult, rng
            )
            proj = None
            if cfg.variant == "combined_similarity":
                proj = nn.Linear(cfg.seq_len, cfg.embed_dim, rng)
            head = nn.MlpHead([cfg.embed_dim, *cfg.hidden, cfg.out_dim], rng)
            self.routes[lang] = LanguageRoute(encoder=encoder, head=head, proj=proj)

    def forward(self, records) -> tuple[Tensor, Tensor]:
        lang = _require_single_language(records)
        route = self.routes[lang]
        subject = _stack(records, "subject_seq")
        if subject.shape[-2:] != (self.cfg.seq_len, self.cfg.embed_dim):
            raise DimensionError(
                f"expected token sequences of shape "
                f"({self.cfg.seq_len}, {self.cfg.embed_dim}), got {subject.shape[-2:]}"
            )
        if self.cfg.variant == "text":
            tokens = subject
        elif self.cfg.variant == "combination":
            tokens = subject + _stack(records, "reference_seq")
        else:  # combined_similarity
            sim = cosine_similarity_matrix(subject, _stack(records, "reference_seq"))
            tokens = subject + route.proj(sim)
        pooled = ad.mean(route.encoder(tokens), axis=-2)
        return route.head(pooled)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for lang in LANGUAGES:
            out.update(self.routes[lang].named_params(lang))
        return out

    def trainable_params(self, language: str | None = None) -> dict[str, Tensor]:
        if language is None:
            return {k: v for k, v in self.named_params().items() if v.grad_enabled}
        if language not in self.routes:
            raise RoutingError(f"no parameter route for language {language!r}")
        return {
            k: v
            for k, v in self.routes[language].named_params(language).items()
            if v.grad_enabled
        }


class SimilarityModel:
    """similarity: flattened cosine-similarity matrix into one shared head."""

    language_routed = False

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.head = nn.MlpHead([cfg.seq_len * cfg.seq_len, *cfg.hidden, cfg.out_dim], rng)

    def forward(self, records) -> tuple[Tensor, Tensor]:
        subject = _stack(records, "subject_seq")
        sim = cosine_similarity_matrix(subject, _stack(records, "reference_seq"))
        flat = ad.reshape(sim, (len(records), self.cfg.seq_len * self.cfg.seq_len))
        return self.head(flat)

    def named_params(self) -> dict[str, Tensor]:
        return self.head.named_params("head")

    def trainable_params(self, language: str | None = None) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items() if v.grad_enabled}


class AudioModel:
    """audio: one shared head over the acoustic feature vector, any language."""

    language_routed = False

    def __init__(self, cfg: ModelConfig, seed: int):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.head = nn.MlpHead([cfg.audio_dim, *cfg.hidden, cfg.out_dim], rng)

    def forward(self, records) -> tuple[Tensor, Tensor]:
        feats = _stack(records, "audio_feat")
        if feats.shape[-1] != self.cfg.audio_dim:
            raise DimensionError(
                f"expected audio width {self.cfg.audio_dim}, got {feats.shape[-1]}"
            )
        return self.head(feats)

    def named_params(self) -> dict[str, Tensor]:
        return self.head.named_params("head")

    def trainable_params(self, language: str | None = None) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_params().items() if v.grad_enabled}


class MultimodalModel:
    """multimodal: frozen text + audio branches feeding a trainable fusion head."""

    language_routed = True  # the text branch routes, so batches stay single-language

    def __init__(
        self,
        cfg: ModelConfig,
        text_branch: RoutedTextModel,
        audio_branch: AudioModel,
        seed: int,
        trainable_branches: bool = False,
    ):
        if text_branch.cfg.task != cfg.task or audio_branch.cfg.task != cfg.task:
            raise ConfigurationError("branch task does not match fusion task")
        self.cfg = cfg
        self.seed = seed
        self.text_branch = text_branch
        self.audio_branch = audio_branch
        self.trainable_branches = bool(trainable_branches)
        for t in {**text_branch.named_params(), **audio_branch.named_params()}.values():
            t.grad_enabled = self.trainable_branches
        fusion_in = (
            text_branch.routes["en"].head.penultimate_width
            + audio_branch.head.penultimate_width
        )
        rng = np.random.default_rng(seed)
        self.fusion = nn.MlpHead([fusion_in, *cfg.hidden, cfg.out_dim], rng)

    @property
    def branch_names(self) -> tuple[str, str]:
        return (self.text_branch.cfg.variant, "audio")

    def forward(self, records) -> tuple[Tensor, Tensor]:
        _, h_text = self.text_branch.forward(records)
        _, h_audio = self.audio_branch.forward(records)
        return self.fusion(ad.concat_last([h_text, h_audio]))

    def named_params(self) -> dict[str, Tensor]:
        out = {f"text.{k}": v for k, v in self.text_branch.named_params().items()}
        out.update({f"audio.{k}": v for k, v in self.audio_branch.named_params().items()})
        out.update(self.fusion.named_params("fusion"))
        return out

    def trainable_params(self, language: str | None = None) -> dict[str, Tensor]:
        out = {k: v for k, v in self.fusion.named_params("fusion").items() if v.grad_enabled}
        if self.trainable_branches:
            out.update(
                {
                    f"text.{k}": v
                    for k, v in self.text_branch.trainable_params(language).items()
                }
            )
            out.update(
                {f"audio.{k}": v for k, v in self.audio_branch.trainable_params().items()}
            )
        return out


Model = RoutedTextModel | SimilarityModel | AudioModel | MultimodalModel


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """Pairwise cosine similarity between the rows of two sequences.

    ``a`` and ``b`` are (..., L, d); the result is (..., L, L) with entry
    (i, j) = cos(a_i, b_j).  Zero-norm rows are rejected upstream by data
    validation; hitting one here raises a degenerate-input error.
    """
    if a.shape != b.shape:
        raise DimensionError(f"cosine similarity needs equal shapes, got {a.shape} and {b.shape}")
    return ad.matmul(ad.row_unit(a), ad.swap_last(ad.row_unit(b)))


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Construct an untrained model for any non-fusion variant."""
    if cfg.variant in TEXT_VARIANTS:
        return RoutedTextModel(cfg, seed)
    if cfg.variant == "similarity":
        return SimilarityModel(cfg, seed)
    if cfg.variant == "audio":
        return AudioModel(cfg, seed)
    raise ConfigurationError(
        "multimodal models are assembled from trained branches via build_multimodal"
    )


def build_multimodal(
    cfg: ModelConfig,
    text_branch: RoutedTextModel,
    audio_branch: AudioModel,
    seed: int,
    trainable_branches: bool = False,
) -> MultimodalModel:
    return MultimodalModel(cfg, text_branch, audio_branch, seed, trainable_branches)


# ---------------------------------------------------------------------------
# forward aliases and inference helpers
# ---------------------------------------------------------------------------


def text_forward(model: RoutedTextModel, records) -> tuple[Tensor, Tensor]:
    return model.forward(records)


def similarity_forward(model: SimilarityModel, records) -> tuple[Tensor, Tensor]:
    return model.forward(records)


def combination_forward(model: RoutedTextModel, records) -> tuple[Tensor, Tensor]:
    return model.forward(records)


def combined_similarity_forward(model: RoutedTextModel, records) -> tuple[Tensor, Tensor]:
    return model.forward(records)


def audio_forward(model: AudioModel, records) -> tuple[Tensor, Tensor]:
    return model.forward(records)


def multimodal_forward(model: MultimodalModel, records) -> tuple[Tensor, Tensor]:
    return model.forward(records)


def predict_outputs(model: Model, records) -> np.ndarray:
    """Raw model outputs for arbitrary record order, without recording a tape.

    Language-routed models are evaluated per language group and the rows are
    scattered back into input order.
    """
    records = list(records)
    if not records:
        return np.zeros((0, model.cfg.out_dim))
    out = np.empty((len(records), model.cfg.out_dim))
    if model.language_routed:
        by_lang: dict[str, list[int]] = {}
        for i, rec in enumerate(records):
            by_lang.setdefault(rec.language, []).append(i)
        for lang, idx in sorted(by_lang.items()):
            logits, _ = model.forward([records[i] for i in idx])
            out[idx] = logits.data
    else:
        logits, _ = model.forward(records)
        out[:] = logits.data
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_payload(model: Model, seed: int | None = None) -> dict:
    """Self-contained JSON document for a trained model.

    Float64 values are serialized via ``repr`` round-trip, so save/load is
    bitwise lossless.  Multimodal checkpoints carry their branch parameters
    inline and name the branch variants in ``branches``.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "variant": model.cfg.variant,
        "task": model.cfg.task,
        "languages": list(LANGUAGES) if model.language_routed else ["any"],
        "config": model.cfg.to_dict(),
        "seed": model.seed if seed is None else seed,
        "params": nn.params_to_payload(model.named_params()),
    }
    if isinstance(model, MultimodalModel):
        payload["branches"] = {
            "text": model.text_branch.cfg.variant,
            "audio": "audio",
            "trainable": model.trainable_branches,
        }
    return payload


def model_from_payload(payload: dict) -> Model:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"unsupported checkpoint format {payload.get('format')!r}")
    cfg_dict = dict(payload["config"])
    cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
    cfg = ModelConfig(**cfg_dict)
    seed = int(payload["seed"])
    if cfg.variant == "multimodal":
        branch_cfg = ModelConfig(**{**cfg.to_dict(), "variant": cfg.text_branch})
        audio_cfg = ModelConfig(**{**cfg.to_dict(), "variant": "audio"})
        model: Model = MultimodalModel(
            cfg,
            RoutedTextModel(branch_cfg, seed),
            AudioModel(audio_cfg, seed),
            seed,
            trainable_branches=bool(payload.get("branches", {}).get("trainable", False)),
        )
    else:
        model = build_model(cfg, seed)
    nn.load_params_payload(model.named_params(), payload["params"])
    return model
