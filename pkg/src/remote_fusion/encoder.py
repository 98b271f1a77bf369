"""Sample records, marker-delimited text layout, patch features and toy multilevel encoders."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor, ShapeError, concat, matmul, softmax

PAD, CLS, SEP, S_OPEN, S_CLOSE, O_OPEN, O_CLOSE = range(7)
FIRST_CONTENT = 7
MARKERS = {PAD, CLS, SEP, S_OPEN, S_CLOSE, O_OPEN, O_CLOSE}
N_POS_FREQ = 4
POS_FEATURES = 6 * 2 * N_POS_FREQ


class DataError(ValueError):
    """A record violates the dataset contract."""


class TruncationError(DataError):
    pass


class ConfigError(ValueError):
    pass


# -- records ----------------------------------------------------------------


@dataclass
class ObjectDescriptor:
    rgb: np.ndarray  # H x W x 3 in [0, 1]
    depth: np.ndarray  # H x W in [0, 1]
    position: tuple  # (cx, cy, w, h), normalized

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.position = tuple(float(v) for v in self.position)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3 or self.depth.shape != self.rgb.shape[:2]:
            raise DataError(f"object grids disagree: rgb {self.rgb.shape}, depth {self.depth.shape}")
        if len(self.position) != 4:
            raise DataError("object position must be (cx, cy, w, h)")
        for name, arr in (("rgb", self.rgb), ("depth", self.depth), ("position", np.asarray(self.position))):
            if not (np.all(arr >= 0.0) and np.all(arr <= 1.0)):
                raise DataError(f"object {name} values must lie in [0, 1]")

    @property
    def H(self) -> int:
        return self.rgb.shape[0]

    @property
    def W(self) -> int:
        return self.rgb.shape[1]

    def to_json(self) -> dict:
        return {
            "H": self.H,
            "W": self.W,
            "depth": self.depth.ravel().tolist(),
            "position": list(self.position),
            "rgb": self.rgb.ravel().tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ObjectDescriptor":
        H, W = int(obj["H"]), int(obj["W"])
        return cls(
            rgb=np.asarray(obj["rgb"], dtype=np.float64).reshape(H, W, 3),
            depth=np.asarray(obj["depth"], dtype=np.float64).reshape(H, W),
            position=obj["position"],
        )


def parse_ref(ref: str) -> tuple[str, int]:
    if not isinstance(ref, str) or len(ref) < 2 or ref[0] not in "eo" or not ref[1:].isdigit():
        raise DataError(f"bad reference {ref!r}; expected 'e<i>' or 'o<i>'")
    return ref[0], int(ref[1:])


@dataclass
class SampleRecord:
    sample_id: str
    tokens: list[int]
    entity_spans: list[tuple[int, int]]
    caption_spans: list[tuple[int, int]]
    objects: list[ObjectDescriptor]
    gold_triplets: list[tuple[str, str, int]] = field(default_factory=list)

    def refs(self) -> list[str]:
        return [f"e{i}" for i in range(len(self.entity_spans))] + [
            f"o{i}" for i in range(len(self.objects))
        ]

    def validate(self, max_tokens: int = 128, max_objects: int = 12, n_relations: int | None = None) -> None:
        sid = self.sample_id
        if len(self.tokens) > max_tokens:
            raise TruncationError(f"sample {sid}: {len(self.tokens)} tokens exceed max_tokens={max_tokens}")
        if len(self.objects) > max_objects:
            raise DataError(f"sample {sid}: {len(self.objects)} objects exceed max_objects={max_objects}")
        if len(self.caption_spans) != len(self.objects):
            raise DataError(f"sample {sid}: {len(self.caption_spans)} captions for {len(self.objects)} objects")
        spans = sorted(list(self.entity_spans) + list(self.caption_spans))
        for s, e in spans:
            if not (0 < s < e < len(self.tokens)):
                raise DataError(f"sample {sid}: span ({s}, {e}) out of bounds or empty")
        for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
            if s1 < e0:
                raise DataError(f"sample {sid}: spans ({s0}, {e0}) and ({s1}, {e1}) overlap")
        for s, e in self.entity_spans:
            if self.tokens[s - 1] != S_OPEN or self.tokens[e] != S_CLOSE:
                raise DataError(f"sample {sid}: entity span ({s}, {e}) not wrapped in <s> </s>")
        for s, e in self.caption_spans:
            if self.tokens[s - 1] != O_OPEN or self.tokens[e] != O_CLOSE:
                raise DataError(f"sample {sid}: caption span ({s}, {e}) not wrapped in <o> </o>")
        counts = {"e": len(self.entity_spans), "o": len(self.objects)}
        for h, t, r in self.gold_triplets:
            for ref in (h, t):
                kind, idx = parse_ref(ref)
                if idx >= counts[kind]:
                    raise DataError(f"sample {sid}: gold reference {ref} does not exist")
            if n_relations is not None and not (0 <= r < n_relations):
                raise DataError(f"sample {sid}: relation id {r} out of range")

    def to_json(self) -> dict:
        return {
            "captions": [list(s) for s in self.caption_spans],
            "entity_spans": [list(s) for s in self.entity_spans],
            "gold_triplets": [[h, t, int(r)] for h, t, r in self.gold_triplets],
            "objects": [o.to_json() for o in self.objects],
            "sample_id": self.sample_id,
            "tokens": [int(t) for t in self.tokens],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SampleRecord":
        try:
            return cls(
                sample_id=str(obj["sample_id"]),
                tokens=[int(t) for t in obj["tokens"]],
                entity_spans=[tuple(s) for s in obj["entity_spans"]],
                caption_spans=[tuple(s) for s in obj["captions"]],
                objects=[ObjectDescriptor.from_json(o) for o in obj["objects"]],
                gold_triplets=[(h, t, int(r)) for h, t, r in obj["gold_triplets"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed record {obj.get('sample_id', '?')}: {exc}") from exc


def dump_record(rec: SampleRecord) -> str:
    return json.dumps(rec.to_json(), sort_keys=True, separators=(",", ":"))


def write_jsonl(path, records: Iterable[SampleRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dump_record(rec))
            fh.write("\n")


def read_jsonl(path) -> list[SampleRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            out.append(SampleRecord.from_json(obj))
    return out


def write_relation_vocab(path, relations: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({name: i for i, name in enumerate(relations)}, fh, indent=2)
        fh.write("\n")


def read_relation_vocab(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        mapping = json.load(fh)
    names = sorted(mapping, key=mapping.get)
    if [mapping[n] for n in names] != list(range(len(names))) or mapping.get("none") != 0:
        raise DataError("relation vocabulary must map names to 0..R-1 with 'none' at 0")
    return names


# -- text layout ------------------------------------------------------------


def assemble_text(
    raw_tokens: Sequence[int],
    entities: Sequence[tuple[int, int]],
    captions: Sequence[Sequence[int]],
    max_tokens: int = 128,
    sample_id: str = "?",
):
    """Lay out ``[CLS] text-with-<s>-entities [SEP] <o>caption</o> ...``.

    ``entities`` are ``(start, end)`` ranges over ``raw_tokens`` (end exclusive).
    Returns ``(tokens, entity_spans, caption_spans)`` with spans indexing the
    interiors of their markers in the final sequence; entity spans come back in
    the order given.
    """
    order = sorted(range(len(entities)), key=lambda i: entities[i][0])
    prev_end = 0
    for i in order:
        s, e = entities[i]
        if not (prev_end <= s < e <= len(raw_tokens)):
            raise DataError(f"sample {sample_id}: entity range {(s, e)} invalid or overlapping")
        prev_end = e

    tokens = [CLS]
    spans: dict[int, tuple[int, int]] = {}
    starts = {entities[i][0]: i for i in order}
    pos = 0
    while pos < len(raw_tokens):
        if pos in starts:
            i = starts[pos]
            s, e = entities[i]
            tokens.append(S_OPEN)
            spans[i] = (len(tokens), len(tokens) + (e - s))
            tokens.extend(raw_tokens[s:e])
            tokens.append(S_CLOSE)
            pos = e
        else:
            tokens.append(raw_tokens[pos])
            pos += 1
    tokens.append(SEP)
    caption_spans = []
    for cap in captions:
        if len(cap) == 0:
            raise DataError(f"sample {sample_id}: empty caption")
        tokens.append(O_OPEN)
        caption_spans.append((len(tokens), len(tokens) + len(cap)))
        tokens.extend(cap)
        tokens.append(O_CLOSE)
    if len(tokens) > max_tokens:
        raise TruncationError(
            f"sample {sample_id}: assembled sequence has {len(tokens)} tokens, max_tokens={max_tokens}"
        )
    return tokens, [spans[i] for i in range(len(entities))], caption_spans


def parse_text(tokens: Sequence[int]):
    """Inverse of :func:`assemble_text` (entities returned in textual order)."""
    if not tokens or tokens[0] != CLS or SEP not in tokens:
        raise DataError("sequence must start with [CLS] and contain [SEP]")
    sep = tokens.index(SEP)
    raw, entities, entity_spans = [], [], []
    i = 1
    while i < sep:
        if tokens[i] == S_OPEN:
            j = tokens.index(S_CLOSE, i)
            entities.append((len(raw), len(raw) + j - i - 1))
            entity_spans.append((i + 1, j))
            raw.extend(tokens[i + 1 : j])
            i = j + 1
        else:
            raw.append(tokens[i])
            i += 1
    captions, caption_spans = [], []
    i = sep + 1
    while i < len(tokens):
        if tokens[i] != O_OPEN:
            raise DataError(f"unexpected token {tokens[i]} after [SEP]")
        j = tokens.index(O_CLOSE, i)
        captions.append(list(tokens[i + 1 : j]))
        caption_spans.append((i + 1, j))
        i = j + 1
    return raw, entities, captions, entity_spans, caption_spans


# -- features ---------------------------------------------------------------


@dataclass
class MultilevelFeatures:
    """Per-layer features of one modality; layers may carry leading batch axes."""

    layers: list
    modality: str = "text"

    def __post_init__(self):
        if len(self.layers) < 2:
            raise ConfigError(f"need at least 2 layers, got {len(self.layers)}")
        shape = self.layers[0].shape
        for l, t in enumerate(self.layers):
            if t.shape != shape:
                raise ShapeError(f"layer {l} has shape {t.shape}, layer 0 has {shape}")

    @property
    def L(self) -> int:
        return len(self.layers)

    def __getitem__(self, j):
        return self.layers[j]

    @property
    def top(self):
        return self.layers[-1]


def sinusoidal_text_positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def position_features(grid_h: int, grid_w: int, position: np.ndarray) -> np.ndarray:
    """Sinusoidal code of (patch row, patch col, cx, cy, w, h) for every patch.

    ``position`` is ``[..., 4]``; output is ``[..., u, POS_FEATURES]`` with
    patches in row-major order.
    """
    position = np.asarray(position, dtype=np.float64)
    rows = (np.repeat(np.arange(grid_h), grid_w) + 0.5) / grid_h
    cols = (np.tile(np.arange(grid_w), grid_h) + 0.5) / grid_w
    u = grid_h * grid_w
    lead = position.shape[:-1]
    vals = np.concatenate(
        [
            np.broadcast_to(rows, lead + (u,))[..., None],
            np.broadcast_to(cols, lead + (u,))[..., None],
            np.broadcast_to(position[..., None, :], lead + (u, 4)),
        ],
        axis=-1,
    )
    freqs = math.pi * 2.0 ** np.arange(N_POS_FREQ)
    ang = vals[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(lead + (u, POS_FEATURES))


def to_patches(grid: np.ndarray, patch: int) -> np.ndarray:
    """``[..., H, W, C]`` -> ``[..., u, P*P*C]``, patches row-major, pixels row-major inside."""
    *lead, H, W, C = grid.shape
    if H % patch or W % patch:
        raise ConfigError(f"grid {H}x{W} is not divisible by patch size {patch}")
    gh, gw = H // patch, W // patch
    x = grid.reshape(*lead, gh, patch, gw, patch, C)
    nl = len(lead)
    x = x.transpose(*range(nl), nl, nl + 2, nl + 1, nl + 3, nl + 4)
    return x.reshape(*lead, gh * gw, patch * patch * C)


def patchify_batch(rgb, depth, position, patch: int, params: dict, *, use_position=True, use_depth=True) -> Tensor:
    """Visual features ``[E_RGB + E_POS ; E_DEPTH + E_POS]`` for objects ``[..., H, W]``.

    ``params`` holds ``rgb`` ``[P*P*3, d]``, ``depth`` ``[P*P, d]`` and ``pos``
    ``[POS_FEATURES, d]`` projections. Returns ``[..., 2u, d]``.
    """
    rgb = np.asarray(rgb)
    depth = np.asarray(depth)
    H, W = rgb.shape[-3], rgb.shape[-2]
    dtype = params["rgb"].dtype
    rgb_p = Tensor(to_patches(rgb, patch).astype(dtype))
    if not use_depth:
        depth = np.zeros_like(depth)
    depth_p = Tensor(to_patches(depth[..., None], patch).astype(dtype))
    e_rgb = matmul(rgb_p, params["rgb"])
    e_depth = matmul(depth_p, params["depth"])
    if use_position:
        pos = Tensor(position_features(H // patch, W // patch, position).astype(dtype))
        e_pos = matmul(pos, params["pos"])
        e_rgb = e_rgb + e_pos
        e_depth = e_depth + e_pos
    return concat([e_rgb, e_depth], axis=-2)


def patchify_object(obj: ObjectDescriptor, patch: int, params: dict, **flags) -> Tensor:
    return patchify_batch(obj.rgb, obj.depth, np.asarray(obj.position), patch, params, **flags)


# -- toy encoder ------------------------------------------------------------


def init_block(rng: np.random.Generator, d: int, hidden: int | None = None, scale: float = 1.0) -> dict:
    hidden = hidden or 2 * d
    s = scale / math.sqrt(d)
    return {
        "wq": rng.normal(0.0, s, (d, d)),
        "wk": rng.normal(0.0, s, (d, d)),
        "wv": rng.normal(0.0, s, (d, d)),
        "w1": rng.normal(0.0, s, (d, hidden)),
        "b1": np.zeros(hidden),
        "w2": rng.normal(0.0, scale / math.sqrt(hidden), (hidden, d)),
        "b2": np.zeros(d),
    }


def encoder_block(x: Tensor, p: dict) -> Tensor:
    """Self-attention + residual, then tanh feed-forward + residual."""
    d = x.shape[-1]
    q = matmul(x, p["wq"])
    k = matmul(x, p["wk"])
    v = matmul(x, p["wv"])
    attn = softmax(matmul(q, k.T) * (1.0 / math.sqrt(d)), axis=-1)
    h = x + matmul(attn, v)
    return h + matmul((matmul(h, p["w1"]) + p["b1"]).tanh(), p["w2"]) + p["b2"]


def encode_multilevel(embedded: Tensor, blocks: Sequence[dict], modality: str = "text") -> MultilevelFeatures:
    """Layer 0 is the embedding itself; layer ``j`` applies block ``j-1`` to layer ``j-1``."""
    layers = [embedded]
    for p in blocks:
        layers.append(encoder_block(layers[-1], p))
    return MultilevelFeatures(layers, modality)


def mixing_text_init(rng: np.random.Generator, vocab: int, d: int, L: int, code_dims: int, code_scale: float = 0.7):
    """Frozen text-encoder weights whose upper layers erase a sentence-wide register code.

    Channel 0 flags marker tokens, channel 1 is constant 1, the last
    ``code_dims`` channels hold the register code: ``+code_scale`` along a fixed
    unit direction for content tokens with odd offset from ``FIRST_CONTENT``,
    ``-code_scale`` for even. In every block content rows attend uniformly over
    content rows and marker rows over marker rows, and each subtracts the
    attended code. Content rows share one register, marker rows carry none, so
    every row is code-free from layer 1 on while layer 0 keeps the code.
    """
    if code_dims < 1 or code_dims > d - 3:
        raise ConfigError(f"code_dims={code_dims} does not fit in d={d}")
    base_dims = d - 2 - code_dims
    direction = np.ones(code_dims) / math.sqrt(code_dims)
    emb = np.zeros((vocab, d))
    emb[:, 1] = 1.0
    n_base = (vocab - FIRST_CONTENT + 1) // 2 + FIRST_CONTENT
    base = rng.normal(0.0, 1.0 / math.sqrt(base_dims), (n_base, base_dims))
    for tok in range(vocab):
        if tok < FIRST_CONTENT:
            emb[tok, 0] = 1.0
            emb[tok, 2 : 2 + base_dims] = base[tok]
        else:
            off = tok - FIRST_CONTENT
            emb[tok, 2 : 2 + base_dims] = base[FIRST_CONTENT + off // 2]
            emb[tok, d - code_dims :] = (code_scale if off % 2 else -code_scale) * direction
    blocks = []
    for _ in range(L - 1):
        wq = np.zeros((d, d))
        wk = np.zeros((d, d))
        wv = np.zeros((d, d))
        # score(i, j) = 1000 * flag_j * (2 * flag_i - 1): same-kind rows win
        wq[0, 0], wq[1, 0] = 2.0, -1.0
        wk[0, 0] = 1000.0 * math.sqrt(d)
        wv[d - code_dims :, d - code_dims :] = -np.eye(code_dims)
        blocks.append(
            {
                "wq": wq,
                "wk": wk,
                "wv": wv,
                "w1": np.zeros((d, 2 * d)),
                "b1": np.zeros(2 * d),
                "w2": np.zeros((2 * d, d)),
                "b2": np.zeros(d),
            }
        )
    return emb, blocks
