"""Byte-level toy tokenizer, procedural image-dialogue samples and JSONL loading."""
from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .images import load_image

PAD, SEP, EOS, UNK = 0, 1, 2, 3
N_RESERVED = 4
_PREFERRED = " " + string.ascii_lowercase + string.digits + "?.,"


class ByteTokenizer:
    """UTF-8 bytes folded into ``vocab_size`` buckets.

    Common characters get their own id; every other byte shares the
    remaining buckets by ``byte % n_free``.
    """

    def __init__(self, vocab_size: int = 64):
        if vocab_size <= N_RESERVED + 1:
            raise ValueError("vocab_size too small")
        self.vocab_size = vocab_size
        room = vocab_size - N_RESERVED
        preferred = _PREFERRED[: max(0, room - 1)]
        self._table = {ord(c): N_RESERVED + i for i, c in enumerate(preferred)}
        self._free_start = N_RESERVED + len(preferred)
        self._n_free = vocab_size - self._free_start
        self._reverse = {v: chr(k) for k, v in self._table.items()}

    def encode(self, text: str) -> list[int]:
        ids = []
        for b in text.encode("utf-8"):
            tid = self._table.get(b)
            if tid is None:
                tid = self._free_start + b % self._n_free
            ids.append(tid)
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i < N_RESERVED:
                continue
            out.append(self._reverse.get(i, "�"))
        return "".join(out)


COLORS = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.1),
}
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
TEMPLATES = ("caption", "color", "position", "count")
QUESTIONS = {
    "caption": "describe the image.",
    "color": "what color is the square?",
    "position": "where is the square?",
    "count": "how many dots?",
}


@dataclass
class ToySample:
    image: np.ndarray
    turns: list[tuple[str, str]]
    params: dict = field(default_factory=dict)
    sample_id: str = ""

    @property
    def templates(self) -> list[str]:
        return self.params.get("templates", [])


def render_toy_image(color: str, position: int, dots: int, shade: float, jitter: tuple[int, int],
                     size: int = 16) -> np.ndarray:
    img = np.full((size, size, 3), shade, dtype=np.float64)
    half = size // 2
    side = max(2, (3 * half) // 4)
    qy, qx = divmod(position, 2)
    y0 = qy * half + min(jitter[0], half - side)
    x0 = qx * half + min(jitter[1], half - side)
    img[y0:y0 + side, x0:x0 + side] = COLORS[color]
    # dots live in the diagonally opposite quadrant
    oy, ox = (1 - qy) * half, (1 - qx) * half
    spacing = max(2, half // 3)
    dot = max(1, spacing // 2)
    for d in range(dots):
        y = oy + half // 2
        x = ox + d * spacing + spacing // 2
        img[y:y + dot, x:x + dot] = 1.0
    return img


def _answer(template: str, color: str, position: int, dots: int) -> str:
    if template == "caption":
        return f"a {color} square at {POSITIONS[position]}"
    if template == "color":
        return color
    if template == "position":
        return POSITIONS[position]
    return str(dots)


def make_toy_sample(seed: int, index: int, mix=(1 / 3, 1 / 3, 1 / 3), size: int = 16) -> ToySample:
    """Deterministic sample keyed by ``(seed, index)``.

    ``mix`` weights the dialogue kind: a caption turn, a single QA turn, or a
    2-3 turn instruction dialogue.
    """
    rng = np.random.default_rng([int(seed), int(index)])
    color = list(COLORS)[rng.integers(len(COLORS))]
    position = int(rng.integers(4))
    dots = int(rng.integers(1, 4))
    shade = float(rng.choice([0.0, 0.2, 0.4]))
    jitter = (int(rng.integers(3)), int(rng.integers(3)))
    p = np.asarray(mix, dtype=np.float64)
    kind = int(rng.choice(3, p=p / p.sum()))
    qa = ["color", "position", "count"]
    if kind == 0:
        templates = ["caption"]
    elif kind == 1:
        templates = [qa[rng.integers(3)]]
    else:
        k = int(rng.integers(2, 4))
        templates = [qa[i] for i in rng.permutation(3)[:k]]
    turns = [(QUESTIONS[t], _answer(t, color, position, dots)) for t in templates]
    image = render_toy_image(color, position, dots, shade, jitter, size)
    params = dict(color=color, position=position, dots=dots, shade=shade, jitter=jitter,
                  templates=templates, seed=int(seed), index=int(index))
    return ToySample(image=image, turns=turns, params=params, sample_id=f"toy:{seed}:{index}")


def gen_toy_dataset(seed: int, count: int, mix=(1 / 3, 1 / 3, 1 / 3), size: int = 16) -> list[ToySample]:
    if count < 1:
        raise ValueError("count must be at least 1")
    return [make_toy_sample(seed, i, mix, size) for i in range(count)]


def _resolve_image(ref, base: Path, size: int) -> np.ndarray:
    if isinstance(ref, str) and ref.startswith("toy:"):
        _, seed, index = ref.split(":")
        return make_toy_sample(int(seed), int(index), size=size).image
    path = Path(ref)
    if not path.is_absolute():
        path = base / path
    return load_image(path)


def load_dialogues(path: str | Path, image_size: int = 16) -> list[ToySample]:
    """Read a JSON-lines dialogue file.

    Each line: ``{"id": ..., "image": "<path>|toy:<seed>:<index>",
    "turns": [{"question": ..., "answer": ...}, ...]}``.  Relative image
    paths resolve against the file's directory.
    """
    from .numerics import as_tensor, bilinear_resize

    path = Path(path)
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                turns = [(t["question"], t.get("answer", "")) for t in rec["turns"]]
                image = _resolve_image(rec["image"], path.parent, image_size)
            except (KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed dialogue record ({exc})") from exc
            if not turns:
                raise ValueError(f"{path}:{lineno}: dialogue has no turns")
            if image.shape[:2] != (image_size, image_size):
                image = bilinear_resize(as_tensor(image), image_size, image_size).numpy()
            samples.append(ToySample(image=image, turns=turns, sample_id=str(rec.get("id", lineno))))
    return samples


def sample_to_record(sample: ToySample) -> dict:
    return {
        "id": sample.sample_id,
        "image": sample.sample_id if sample.sample_id.startswith("toy:") else None,
        "turns": [{"question": q, "answer": a} for q, a in sample.turns],
    }
