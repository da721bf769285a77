"""Synthetic answer-grounding task: scenes, rendering, questions, tokenizer, dataset files."""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANVAS = 64
BACKGROUND = (0.5, 0.5, 0.5)
SHAPES = ("circle", "square", "triangle")
COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
}
LOCATIONS = ("left", "right", "top", "bottom")
QUESTION_TYPES = ("color-of-shape", "shape-of-color", "where-is")
RADIUS_RANGE = (8, 14)
# "where is" is only asked when the dominant axis wins by at least this many pixels
WHERE_MARGIN = 6
MAX_ATTEMPTS = 1000
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_SIZES = {"train": 2000, "val": 400, "test": 400}


class GenerationError(RuntimeError):
    pass


class ParseError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary


PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)
WORDS = ("what", "color", "shape", "is", "the", "object", "where") + SHAPES + tuple(COLORS) + LOCATIONS


class Vocab:
    def __init__(self, words=WORDS):
        self.itos = list(SPECIALS) + list(words)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    pad = property(lambda self: self.stoi[PAD])
    bos = property(lambda self: self.stoi[BOS])
    eos = property(lambda self: self.stoi[EOS])
    unk = property(lambda self: self.stoi[UNK])


VOCAB = Vocab()


@dataclass
class Encoding:
    ids: list[int]
    unknown: bool = False
    truncated: bool = False

    @property
    def valid(self) -> list[bool]:
        return [i != VOCAB.pad for i in self.ids]


def tokenize(text: str, length: int | None = None, vocab: Vocab = VOCAB) -> Encoding:
    """Whitespace word ids wrapped in BOS/EOS, padded (or truncated) to ``length``."""
    ids = [vocab.bos]
    unknown = False
    for word in text.split():
        if word in vocab.stoi and word not in SPECIALS:
            ids.append(vocab.stoi[word])
        else:
            ids.append(vocab.unk)
            unknown = True
    ids.append(vocab.eos)
    truncated = False
    if length is not None:
        if len(ids) > length:
            ids = ids[: length - 1] + [vocab.eos]
            truncated = True
        ids = ids + [vocab.pad] * (length - len(ids))
    if unknown:
        warnings.warn(f"out-of-vocabulary word in {text!r}", stacklevel=2)
    return Encoding(ids, unknown, truncated)


def detokenize(ids, vocab: Vocab = VOCAB) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == vocab.eos:
            break
        if i in (vocab.bos, vocab.pad):
            continue
        words.append(vocab.itos[i])
    return " ".join(words)


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    radius: int


@dataclass
class Scene:
    objects: list[SceneObject] = field(default_factory=list)
    size: int = CANVAS


def validate_scene(scene: Scene) -> list[str]:
    """Return the list of invariant violations (empty when the scene is valid)."""
    problems = []
    n = len(scene.objects)
    if not 2 <= n <= 4:
        problems.append(f"object count {n} outside 2..4")
    pairs = [(o.shape, o.color) for o in scene.objects]
    if len(set(pairs)) != len(pairs):
        problems.append("duplicate (shape, color) pair")
    for o in scene.objects:
        if o.shape not in SHAPES or o.color not in COLORS:
            problems.append(f"unknown attribute in {o}")
        if o.cx - o.radius < 0 or o.cy - o.radius < 0 or o.cx + o.radius > scene.size or o.cy + o.radius > scene.size:
            problems.append(f"{o} leaves the canvas")
    for i in range(n):
        for j in range(i + 1, n):
            a, b = scene.objects[i], scene.objects[j]
            if math.hypot(a.cx - b.cx, a.cy - b.cy) < a.radius + b.radius:
                problems.append(f"objects {i} and {j} overlap")
    return problems


def generate_scene(rng: np.random.Generator, size: int = CANVAS) -> Scene:
    """Draw 2-4 non-overlapping objects with distinct (shape, color) pairs."""
    n = int(rng.integers(2, 5))
    pairs = [(s, c) for s in SHAPES for c in COLORS]
    chosen = rng.choice(len(pairs), size=n, replace=False)
    objects: list[SceneObject] = []
    for k in chosen:
        shape, color = pairs[int(k)]
        for _ in range(MAX_ATTEMPTS):
            r = int(rng.integers(RADIUS_RANGE[0], RADIUS_RANGE[1] + 1))
            cx = int(rng.integers(r, size - r + 1))
            cy = int(rng.integers(r, size - r + 1))
            if all(math.hypot(cx - o.cx, cy - o.cy) >= r + o.radius for o in objects):
                objects.append(SceneObject(shape, color, cx, cy, r))
                break
        else:
            raise GenerationError(f"could not place object {len(objects) + 1} of {n} after {MAX_ATTEMPTS} attempts")
    return Scene(objects, size)


# ---------------------------------------------------------------------------
# rendering


def object_mask(obj: SceneObject, size: int = CANVAS) -> np.ndarray:
    """Hard-edged footprint: pixel centres strictly inside the shape.

    Squares and triangles are inscribed in the object's circle, so the
    no-overlap rule on circles keeps every footprint disjoint.
    """
    ys, xs = np.mgrid[0:size, 0:size]
    px = xs + 0.5 - obj.cx
    py = ys + 0.5 - obj.cy
    r = obj.radius
    if obj.shape == "circle":
        return px * px + py * py < r * r
    if obj.shape == "square":
        h = r / math.sqrt(2.0)
        return (np.abs(px) < h) & (np.abs(py) < h)
    # upward equilateral triangle with vertices on the circle
    top = (0.0, -r)
    left = (-r * math.sqrt(3) / 2, r / 2)
    right = (r * math.sqrt(3) / 2, r / 2)

    def side(a, b):
        return (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])

    s1, s2, s3 = side(top, right), side(right, left), side(left, top)
    return (s1 > 0) & (s2 > 0) & (s3 > 0)


def render(scene: Scene) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rasterise to a 3×H×W float image in [0, 1] and one boolean mask per object."""
    img = np.empty((3, scene.size, scene.size))
    img[:] = np.asarray(BACKGROUND)[:, None, None]
    masks = []
    for obj in scene.objects:
        m = object_mask(obj, scene.size)
        img[:, m] = np.asarray(COLORS[obj.color])[:, None]
        masks.append(m)
    return img, masks


# ---------------------------------------------------------------------------
# questions


def location_word(cx: float, cy: float, size: int = CANVAS) -> str:
    """Dominant offset from the canvas centre; ties go horizontal, then left/top."""
    dx, dy = cx - size / 2, cy - size / 2
    if abs(dx) >= abs(dy):
        return "left" if dx <= 0 else "right"
    return "top" if dy <= 0 else "bottom"


def _candidates(scene: Scene) -> list[tuple[str, int]]:
    shapes = [o.shape for o in scene.objects]
    colors = [o.color for o in scene.objects]
    out = []
    half = scene.size / 2
    for i, o in enumerate(scene.objects):
        if shapes.count(o.shape) == 1:
            out.append(("color-of-shape", i))
        if colors.count(o.color) == 1:
            out.append(("shape-of-color", i))
        if abs(abs(o.cx - half) - abs(o.cy - half)) >= WHERE_MARGIN:
            out.append(("where-is", i))
    return out


def question_for(qtype: str, obj: SceneObject) -> tuple[str, str]:
    if qtype == "color-of-shape":
        return f"what color is the {obj.shape}", obj.color
    if qtype == "shape-of-color":
        return f"what shape is the {obj.color} object", obj.shape
    if qtype == "where-is":
        return f"where is the {obj.color} {obj.shape}", location_word(obj.cx, obj.cy)
    raise ValueError(f"unknown question type {qtype!r}")


def make_qa(scene: Scene, rng: np.random.Generator) -> tuple[str, str, int, str]:
    """Pick a question type uniformly, then a referent that makes it unambiguous.

    Returns (question, answer, referent index, question type).
    """
    cands = _candidates(scene)
    if not cands:
        raise GenerationError("scene admits no unambiguous question")
    types = sorted({t for t, _ in cands}, key=QUESTION_TYPES.index)
    qtype = types[int(rng.integers(len(types)))]
    objs = [i for t, i in cands if t == qtype]
    ref = objs[int(rng.integers(len(objs)))]
    q, a = question_for(qtype, scene.objects[ref])
    return q, a, ref, qtype


# ---------------------------------------------------------------------------
# samples


@dataclass
class Sample:
    id: str
    image: np.ndarray  # 3×H×W in [0, 1]
    question: str
    answer: str
    mask: np.ndarray  # H×W bool
    split: str = "train"
    question_type: str = ""
    referent: dict | None = None

    def question_encoding(self, length: int) -> Encoding:
        return tokenize(self.question, length)

    def answer_encoding(self, length: int) -> Encoding:
        return tokenize(self.answer, length)


def make_sample(rng: np.random.Generator, sample_id: str, split: str = "train") -> Sample:
    for _ in range(MAX_ATTEMPTS):
        scene = generate_scene(rng)
        if _candidates(scene):
            break
    else:
        raise GenerationError(f"no answerable question in {MAX_ATTEMPTS} scenes")
    img, masks = render(scene)
    q, a, ref, qtype = make_qa(scene, rng)
    obj = scene.objects[ref]
    referent = {"shape": obj.shape, "color": obj.color, "cx": obj.cx, "cy": obj.cy, "radius": obj.radius}
    return Sample(sample_id, quantize(img), q, a, masks[ref], split, qtype, referent)


_MIRROR = {"left": "right", "right": "left"}


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Label-preserving variant of a sample: palette permutation plus optional mirror.

    Colours are swapped consistently in pixels, question and answer (the
    palette is closed, so this is exact). Half the time the scene is mirrored
    left-right and a left/right answer flips with it; the "where is" margin
    keeps the dominant axis unchanged under the one-pixel shift of the
    mirrored centre.
    """
    names = list(COLORS)
    perm = dict(zip(names, (names[i] for i in rng.permutation(len(names)))))
    img8 = np.round(sample.image * 255).astype(np.int64)
    out = sample.image.copy()
    for src, dst in perm.items():
        hit = np.all(img8 == np.round(np.asarray(COLORS[src]) * 255)[:, None, None], axis=0)
        out[:, hit] = quantize(np.asarray(COLORS[dst]))[:, None]
    swap = lambda text: " ".join(perm.get(w, w) for w in text.split())
    question, answer, mask = swap(sample.question), swap(sample.answer), sample.mask
    ref = dict(sample.referent) if sample.referent else None
    if ref:
        ref["color"] = perm[ref["color"]]
    if rng.uniform() < 0.5:
        out, mask = out[:, :, ::-1].copy(), mask[:, ::-1].copy()
        answer = _MIRROR.get(answer, answer)
        if ref:
            ref["cx"] = mask.shape[1] - 1 - ref["cx"]
    return Sample(sample.id, out, question, answer, mask, sample.split, sample.question_type, ref)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to 8-bit levels so in-memory images equal what PPM stores."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def generate_split(seed: int, n: int, split: str) -> list[Sample]:
    """Samples of one split; each sample owns an independent seeded stream."""
    tag = SPLITS.index(split)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, tag, i])
        out.append(make_sample(rng, f"{split}-{i:05d}", split))
    return out


def generate_dataset(seed: int, sizes: dict[str, int] | None = None) -> dict[str, list[Sample]]:
    sizes = dict(DEFAULT_SPLIT_SIZES if sizes is None else sizes)
    return {split: generate_split(seed, sizes.get(split, 0), split) for split in SPLITS}


def check_answer(question: str, answer: str, image: np.ndarray, mask: np.ndarray, referent: dict | None = None) -> list[str]:
    """Re-derive the answer from pixels (colour, shape) and the referent centre (location).

    Written separately from the generator's templates so the two can disagree.
    """
    img8 = np.round(image * 255).astype(int)
    if not mask.any():
        return ["empty ground-truth mask"]
    palette = {tuple(int(round(v * 255)) for v in rgb): name for name, rgb in COLORS.items()}
    pix = {tuple(img8[:, y, x]) for y, x in zip(*np.nonzero(mask))}
    if len(pix) != 1 or next(iter(pix)) not in palette:
        return [f"mask pixels are not a single object colour: {sorted(pix)}"]
    color = palette[next(iter(pix))]
    ys, xs = np.nonzero(mask)
    fill = mask.sum() / ((xs.max() - xs.min() + 1) * (ys.max() - ys.min() + 1))
    shape = "square" if fill > 0.95 else "circle" if fill > 0.65 else "triangle"

    problems = []
    if referent is not None and (referent["shape"], referent["color"]) != (shape, color):
        problems.append(f"referent record {referent['shape']}/{referent['color']} vs pixels {shape}/{color}")
    words = question.split()
    if words[:4] == ["what", "color", "is", "the"] and len(words) == 5:
        if words[4] != shape:
            problems.append(f"question names {words[4]!r}, mask is a {shape}")
        expected = color
    elif words[:4] == ["what", "shape", "is", "the"] and words[5:] == ["object"]:
        if words[4] != color:
            problems.append(f"question names {words[4]!r}, mask is {color}")
        expected = shape
    elif words[:3] == ["where", "is", "the"] and len(words) == 5:
        if words[3:] != [color, shape]:
            problems.append(f"question names {words[3:]}, mask is {color} {shape}")
        if referent is None:
            return problems + ["location questions need the referent record"]
        dx = referent["cx"] - CANVAS / 2
        dy = referent["cy"] - CANVAS / 2
        horizontal = dx * dx >= dy * dy
        table = {(True, True): "left", (True, False): "right", (False, True): "top", (False, False): "bottom"}
        expected = table[(horizontal, (dx if horizontal else dy) <= 0)]
    else:
        return [f"unknown template: {question!r}"]
    if answer != expected:
        problems.append(f"answer {answer!r} != rule-derived {expected!r}")
    return problems


def check_sample(sample: "Sample") -> list[str]:
    problems = check_answer(sample.question, sample.answer, sample.image, sample.mask, sample.referent)
    if sample.referent is not None:
        obj = SceneObject(**sample.referent)
        if not np.array_equal(object_mask(obj), sample.mask):
            problems.append("mask differs from the referent footprint")
    return problems


# ---------------------------------------------------------------------------
# PPM / PGM codecs


def _read_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    """Parse a netpbm header; returns (width, height, maxval, data offset)."""
    if not buf.startswith(magic):
        raise ParseError(f"{path}: byte 0: expected magic {magic.decode()}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: byte {pos}: expected header integer")
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ParseError(f"{path}: byte {pos}: expected whitespace after header")
    w, h, maxval = fields
    if maxval != 255:
        raise ParseError(f"{path}: byte {pos}: only maxval 255 supported, got {maxval}")
    return w, h, maxval, pos + 1


def encode_ppm(image: np.ndarray) -> bytes:
    """3×H×W floats in [0, 1] → binary P6 bytes."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"PPM needs 3 channels, got {c}")
    raw = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    return f"P6\n{w} {h}\n255\n".encode() + raw.tobytes()


def decode_ppm(buf: bytes, path="<bytes>") -> np.ndarray:
    w, h, _, off = _read_header(buf, b"P6", path)
    need = w * h * 3
    if len(buf) - off != need:
        raise ParseError(f"{path}: byte {off}: expected {need} pixel bytes, found {len(buf) - off}")
    raw = np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(h, w, 3)
    return raw.transpose(2, 0, 1).astype(np.float64) / 255.0


def encode_pgm(mask: np.ndarray) -> bytes:
    """Boolean H×W → binary P5 bytes with values 0/255."""
    h, w = mask.shape
    return f"P5\n{w} {h}\n255\n".encode() + (np.asarray(mask, bool).astype(np.uint8) * 255).tobytes()


def decode_pgm(buf: bytes, path="<bytes>") -> np.ndarray:
    w, h, _, off = _read_header(buf, b"P5", path)
    if len(buf) - off != w * h:
        raise ParseError(f"{path}: byte {off}: expected {w * h} pixel bytes, found {len(buf) - off}")
    raw = np.frombuffer(buf, dtype=np.uint8, offset=off).reshape(h, w)
    bad = np.flatnonzero((raw != 0) & (raw != 255))
    if bad.size:
        raise ParseError(f"{path}: byte {off + int(bad[0])}: mask value not 0/255")
    return raw == 255


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes(), path)


def write_pgm(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(mask))


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes(), path)


# ---------------------------------------------------------------------------
# dataset directories

ANNOTATIONS = "annotations.jsonl"


def write_dataset(samples, root) -> None:
    """Write ``<root>/<split>/{<id>.ppm,<id>_mask.pgm}`` and one annotation file.

    ``samples`` is a list or a split→list mapping.
    """
    root = Path(root)
    if isinstance(samples, dict):
        samples = [s for split in SPLITS for s in samples.get(split, [])]
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        d = root / s.split
        d.mkdir(exist_ok=True)
        write_ppm(d / f"{s.id}.ppm", s.image)
        write_pgm(d / f"{s.id}_mask.pgm", s.mask)
        rec = {"id": s.id, "question": s.question, "answer": s.answer, "split": s.split}
        if s.question_type:
            rec["question_type"] = s.question_type
        if s.referent is not None:
            rec["referent"] = s.referent
        lines.append(json.dumps(rec, sort_keys=True))
    (root / ANNOTATIONS).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_dataset(root, split: str | None = None) -> list[Sample]:
    root = Path(root)
    ann = root / ANNOTATIONS
    if not ann.exists():
        raise FileNotFoundError(f"no {ANNOTATIONS} in {root}")
    out = []
    with open(ann, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, q, a, sp = rec["id"], rec["question"], rec["answer"], rec["split"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{ann}: line {lineno}: {exc}") from exc
            if split is not None and sp != split:
                continue
            d = root / sp
            img = read_ppm(d / f"{sid}.ppm")
            mask = read_pgm(d / f"{sid}_mask.pgm")
            out.append(Sample(sid, img, q, a, mask, sp, rec.get("question_type", ""), rec.get("referent")))
    if split is not None and not out and not (root / split).is_dir():
        raise FileNotFoundError(f"split {split!r} not found under {root}")
    return out


def validate_dataset(root) -> list[str]:
    """Re-check every sample with the pixel-level rule checker."""
    problems = []
    for s in read_dataset(root):
        for p in check_sample(s):
            problems.append(f"{s.id}: {p}")
    return problems


def list_files(root) -> list[str]:
    root = Path(root)
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file())


def batch_arrays(samples: list[Sample], max_q: int, max_a: int):
    """Stack samples into model-ready arrays."""
    images = np.stack([s.image for s in samples])
    q = [tokenize(s.question, max_q) for s in samples]
    a = [tokenize(s.answer, max_a) for s in samples]
    q_ids = np.array([e.ids for e in q], dtype=np.int64)
    a_ids = np.array([e.ids for e in a], dtype=np.int64)
    masks = np.stack([s.mask for s in samples]).astype(np.float64)
    return images, q_ids, q_ids != VOCAB.pad, a_ids, masks


def dataset_digest(root) -> str:
    h = hashlib.sha256()
    for rel in list_files(root):
        h.update(rel.encode())
        h.update((Path(root) / rel).read_bytes())
    return h.hexdigest()

