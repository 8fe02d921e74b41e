"""Caption filtering rules, SSIM image scoring and QA-pair scoring.

Similarity and language-model scorers are pluggable.  The bundled ones are
small deterministic stand-ins (hashed character n-gram embeddings and an
add-one smoothed unigram model) so that the scoring arithmetic can run and be
tested without any external model.
"""
from __future__ import annotations

import dataclasses
import hashlib
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .images import to_grayscale
from .numerics import as_tensor, bilinear_resize

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
FULL_WEIGHT = 1.0
SUB_WEIGHT = 0.25
SSIM_LAMBDA = 0.5


@dataclass(frozen=True)
class FilterThresholds:
    alnum_min: float = 0.60
    char_rep_len: int = 10
    char_rep_max: float = 0.09373663
    word_rep_len: int = 10
    word_rep_max: float = 0.03085751
    special_min: float = 0.16534802
    special_max: float = 0.42023757
    flagged_max: float = 0.0
    perplexity_max: float = 5500.0
    itm_min: float = 0.8
    clip_sim_min: float = 0.28

    def replace(self, **overrides) -> "FilterThresholds":
        unknown = set(overrides) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ValueError(f"unknown threshold(s): {sorted(unknown)}")
        return dataclasses.replace(self, **overrides)


# rule names in the order the rules are listed in the filtering table
RULES = (
    "alphanumeric", "character_repetition", "flagged_words", "perplexity",
    "special_characters", "word_repetition", "image_text_matching", "image_text_similarity",
)

FLAGGED_WORDS = frozenset({"porn", "xxx", "nsfw", "viagra", "casino", "sex", "nude"})


# ---------------------------------------------------------------------------
# text metrics


def _rep_ratio(items: Sequence, n: int) -> float:
    total = len(items) - n + 1
    if total < 1:
        return 0.0
    grams = [tuple(items[i:i + n]) for i in range(total)]
    return (total - len(set(grams))) / total


def _words(text: str) -> list[str]:
    return text.lower().split()


def text_ratios(text: str, th: FilterThresholds | None = None,
                flagged: frozenset[str] = FLAGGED_WORDS) -> dict[str, float]:
    """Rule-based ratios over the unicode characters / whitespace words of ``text``."""
    if not text:
        raise ValueError("empty text")
    th = th or FilterThresholds()
    n = len(text)
    alnum = sum(c.isalnum() for c in text)
    words = _words(text)
    stripped = [w.strip(".,;:!?\"'()[]") for w in words]
    return {
        "alnum_ratio": alnum / n,
        "special_ratio": (n - alnum) / n,
        "char_rep_ratio": _rep_ratio(text, th.char_rep_len),
        "word_rep_ratio": _rep_ratio(words, th.word_rep_len),
        "flagged_ratio": (sum(w in flagged for w in stripped) / len(words)) if words else 0.0,
    }


class UnigramLM:
    """Add-one smoothed unigram model.

    ``p(w) = (count(w) + 1) / (N + V)`` with ``V`` the number of known word
    types; an unseen word gets the zero-count probability.
    """

    def __init__(self, counts: dict[str, int] | Counter):
        self.counts = Counter({k.lower(): int(v) for k, v in counts.items()})
        self.total = sum(self.counts.values())
        self.vocab = len(self.counts)
        if self.vocab == 0:
            raise ValueError("unigram model needs at least one word type")

    @classmethod
    def from_corpus(cls, texts) -> "UnigramLM":
        c = Counter()
        for t in texts:
            c.update(_words(t))
        return cls(c)

    def prob(self, word: str) -> float:
        return (self.counts.get(word.lower(), 0) + 1) / (self.total + self.vocab)


def perplexity(text: str, lm: UnigramLM) -> float:
    words = _words(text)
    if not words:
        raise ValueError("empty text")
    mean_log = sum(math.log(lm.prob(w)) for w in words) / len(words)
    return math.exp(-mean_log)


_COMMON_WORDS = (
    "the of and a to in is it that for on with as was at by this be from are or an have not "
    "they which you one but all his her their there were been has more when can will would "
    "about up out into its no what so some two time other than then these could over only new "
    "people like any my also after many first most made way did down day very may should use "
    "man where how each see just through years back before good much long old great little "
    "world own same still three small large big under place while well found right between "
    "home light white black red green blue yellow orange brown gray dog cat car tree house "
    "street city water sky sun road room table chair woman girl boy child person people "
    "photo image picture view front background close young standing sitting walking holding "
    "wearing near top bottom left side dark bright colorful beautiful wooden green field park "
    "beach mountain river flower grass window door building sign food plate cup bed book"
).split()


def default_lm() -> UnigramLM:
    # Zipf-shaped counts over a small common-word list
    return UnigramLM({w: max(1, int(1_000_000 / (rank + 1))) for rank, w in enumerate(_COMMON_WORDS)})


# ---------------------------------------------------------------------------
# similarity scorers


class SimilarityScorer(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image: np.ndarray) -> np.ndarray: ...

    def similarity(self, text: str, image: np.ndarray) -> float: ...


_COLOR_NAMES = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.1), "white": (1.0, 1.0, 1.0), "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
}


class HashedScorer:
    """Bag of hashed character trigrams; images are described in words first.

    An image becomes the names of the nearest palette colours of its four
    quadrants and of the whole frame, then goes through the text path, so a
    caption naming the right colours scores higher.
    """

    def __init__(self, dim: int = 128, ngram: int = 3):
        self.dim = dim
        self.ngram = ngram

    def _bucket(self, gram: str) -> int:
        return int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=4).digest(), "little") % self.dim

    def embed_text(self, text: str) -> np.ndarray:
        v = np.zeros(self.dim)
        for w in _words(text):
            padded = f" {w} "
            for i in range(max(1, len(padded) - self.ngram + 1)):
                v[self._bucket(padded[i:i + self.ngram])] += 1.0
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    def describe(self, image: np.ndarray) -> str:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        H, W = img.shape[:2]
        regions = [img, img[:H // 2, :W // 2], img[:H // 2, W // 2:], img[H // 2:, :W // 2], img[H // 2:, W // 2:]]
        names = []
        palette = np.array(list(_COLOR_NAMES.values()))
        keys = list(_COLOR_NAMES)
        for r in regions:
            px = r.reshape(-1, 3)
            # most saturated pixel best represents the region's object colour
            sat = px.max(1) - px.min(1)
            c = px[int(np.argmax(sat))] if sat.max() > 0.2 else px.mean(0)
            names.append(keys[int(np.argmin(((palette - c) ** 2).sum(1)))])
        return " ".join(names)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.embed_text(self.describe(image))

    def similarity(self, text: str, image: np.ndarray) -> float:
        return float(self.embed_text(text) @ self.embed_image(image))


# ---------------------------------------------------------------------------
# caption filter


@dataclass
class FilterResult:
    keep: bool
    reasons: list[str]
    metrics: dict[str, float] = field(default_factory=dict)

    def to_record(self, rec_id) -> dict:
        return {"id": rec_id, "decision": "keep" if self.keep else "reject",
                "reasons": self.reasons, "metrics": self.metrics}


def filter_caption(
    text: str,
    image: np.ndarray | None = None,
    thresholds: FilterThresholds | None = None,
    scorer: SimilarityScorer | None = None,
    lm: UnigramLM | None = None,
    itm_scorer: SimilarityScorer | None = None,
    itm_score: float | None = None,
    clip_score: float | None = None,
) -> FilterResult:
    """Apply every caption rule; ``reasons`` lists each violated rule in table order.

    The two image-text rules run only when a score is given or can be
    computed (an image plus a scorer); otherwise they are skipped.  Bounds are
    inclusive: a metric exactly at its limit passes.
    """
    th = thresholds or FilterThresholds()
    lm = lm or default_lm()
    m = text_ratios(text, th)
    m["perplexity"] = perplexity(text, lm)
    if clip_score is None and image is not None and scorer is not None:
        clip_score = scorer.similarity(text, image)
    if itm_score is None and image is not None and itm_scorer is not None:
        itm_score = itm_scorer.similarity(text, image)
    if clip_score is not None:
        m["clip_score"] = float(clip_score)
    if itm_score is not None:
        m["itm_score"] = float(itm_score)

    violated = {
        "alphanumeric": m["alnum_ratio"] < th.alnum_min,
        "character_repetition": m["char_rep_ratio"] > th.char_rep_max,
        "flagged_words": m["flagged_ratio"] > th.flagged_max,
        "perplexity": m["perplexity"] > th.perplexity_max,
        "special_characters": not th.special_min <= m["special_ratio"] <= th.special_max,
        "word_repetition": m["word_rep_ratio"] > th.word_rep_max,
        "image_text_matching": itm_score is not None and itm_score < th.itm_min,
        "image_text_similarity": clip_score is not None and clip_score < th.clip_sim_min,
    }
    reasons = [r for r in RULES if violated[r]]
    return FilterResult(not reasons, reasons, m)


# ---------------------------------------------------------------------------
# image scores


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-window SSIM from whole-image statistics (population moments)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = (da * da).mean(), (db * db).mean()
    cov = (da * db).mean()
    return float(((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2))
                 / ((mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)))


def resize_gray(img: np.ndarray, h: int, w: int) -> np.ndarray:
    return bilinear_resize(as_tensor(img)[..., None], h, w)[..., 0].numpy()


def round_trip(img: np.ndarray, size: int) -> np.ndarray:
    """Down/up-sample through a ``size x size`` grid back to the original shape."""
    h, w = img.shape
    return resize_gray(resize_gray(img, size, size), h, w)


@dataclass
class ImageScore:
    ssim_w: float
    ssim_s: dict[tuple[int, int], float]
    ssim_a: float
    clip_score: float
    total: float

    def to_dict(self) -> dict:
        return {"ssim_w": self.ssim_w,
                "ssim_s": {f"{i},{j}": v for (i, j), v in self.ssim_s.items()},
                "ssim_a": self.ssim_a, "clip_score": self.clip_score, "total": self.total}


def image_generation_score(image: np.ndarray, crop_size: int, scorer: SimilarityScorer | None = None,
                           description: str = "", clip_score: float | None = None) -> ImageScore:
    gray = to_grayscale(image)
    H, W = gray.shape
    if H % 2 or W % 2:
        raise ValueError(f"image {H}x{W} must have even sides")
    if crop_size < 1:
        raise ValueError("crop size must be positive")
    ssim_w = ssim(gray, round_trip(gray, crop_size))
    h, w = H // 2, W // 2
    ssim_s = {}
    for i in (1, 2):
        for j in (1, 2):
            sub = gray[h * (i - 1):h * i, w * (j - 1):w * j]
            ssim_s[(i, j)] = ssim(sub, round_trip(sub, crop_size))
    ssim_a = FULL_WEIGHT * ssim_w + sum(SUB_WEIGHT * v for v in ssim_s.values())
    if clip_score is None:
        clip_score = (scorer or HashedScorer()).similarity(description, image)
    total = clip_score + SSIM_LAMBDA * ssim_a
    return ImageScore(ssim_w, ssim_s, ssim_a, float(clip_score), total)


def qa_final_score(statements: Sequence[str], image: np.ndarray, scorer: SimilarityScorer | None = None) -> float:
    if not statements:
        raise ValueError("need at least one statement")
    scorer = scorer or HashedScorer()
    return sum(scorer.similarity(s, image) for s in statements) / len(statements)
