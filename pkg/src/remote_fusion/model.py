"""The full pipeline: encoders, multilevel OT fusion, cross-modal experts, routing, relation head.

Samples are processed in batches whose records share one shape signature
(token count, entity count, object count, image size), so every stage is a
plain batched tensor op with no padding or masks.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc
from .attention import interact
from .config import RunConfig
from .encoder import ConfigError, MultilevelFeatures, SampleRecord, parse_ref
from .head import classifier_logits, init_classifier
from .moe import ExpertWeights, MixedRepresentation, expert_mask, expert_tags, mix, route
from .ot import enhance_multilevel
from .tensor import Tensor, concat, matmul

PARAM_GROUPS = (
    "embed",
    "text_encoder",
    "vision_patch",
    "vision_encoder",
    "fusion",
    "mot_ca",
    "cross_attention",
    "router",
    "classifier",
)


def bucket_key(rec: SampleRecord) -> tuple:
    H, W = (rec.objects[0].H, rec.objects[0].W) if rec.objects else (0, 0)
    return (len(rec.tokens), len(rec.entity_spans), len(rec.objects), H, W)


def candidate_pairs(rec: SampleRecord, kinds=("ee", "eo", "oe", "oo"), allow_self: bool = False):
    """Ordered ``(head, tail, gold)`` over the record's refs, as indices into ``rec.refs()``."""
    refs = rec.refs()
    index = {r: i for i, r in enumerate(refs)}
    gold = {(index[h], index[t]): r for h, t, r in rec.gold_triplets}
    out = []
    for hi, h in enumerate(refs):
        for ti, t in enumerate(refs):
            if hi == ti and not allow_self:
                continue
            if h[0] + t[0] not in kinds:
                continue
            out.append((hi, ti, gold.get((hi, ti), 0)))
    return out


@dataclass
class Batch:
    records: list
    token_ids: np.ndarray  # [B, n]
    caption_mask: np.ndarray  # [B, n], 1 inside caption spans
    rgb: np.ndarray  # [B, K, H, W, 3]
    depth: np.ndarray  # [B, K, H, W]
    position: np.ndarray  # [B, K, 4]
    pool_text: np.ndarray  # [B, R, n]
    pool_vis: np.ndarray  # [B, R, K*2u]
    pair_sample: np.ndarray
    pair_head: np.ndarray  # flat index into B*R refs
    pair_tail: np.ndarray
    pair_gold: np.ndarray
    pair_refs: list = field(default_factory=list)  # (sample_id, head_ref, tail_ref)

    @property
    def size(self) -> int:
        return len(self.records)

    def select_pairs(self, idx) -> "Batch":
        idx = np.asarray(idx, dtype=np.int64)
        return Batch(
            self.records, self.token_ids, self.caption_mask, self.rgb, self.depth, self.position,
            self.pool_text, self.pool_vis, self.pair_sample[idx], self.pair_head[idx],
            self.pair_tail[idx], self.pair_gold[idx], [self.pair_refs[i] for i in idx],
        )


def collate(records, config: RunConfig) -> Batch:
    keys = {bucket_key(r) for r in records}
    if len(keys) != 1:
        raise ConfigError(f"batch mixes shape signatures {sorted(keys)}")
    n, E, K, H, W = keys.pop()
    if K == 0:
        raise ConfigError("records without objects are not supported")
    P = config.patch_size
    if H % P or W % P:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {P}")
    rows = 2 * (H // P) * (W // P)
    B, R = len(records), E + K
    mode = config.span_repr
    token_ids = np.array([r.tokens for r in records], dtype=np.int64)
    if token_ids.max() >= config.vocab_size:
        raise ConfigError(f"token id {token_ids.max()} outside vocabulary of {config.vocab_size}")
    caption_mask = np.zeros((B, n))
    pool_text = np.zeros((B, R, n))
    pool_vis = np.zeros((B, R, K * rows))
    for b, rec in enumerate(records):
        for i, (s, e) in enumerate(rec.entity_spans):
            lo, hi = (s - 1, s) if mode == "marker" else (s, e)
            pool_text[b, i, lo:hi] = 1.0 / (hi - lo)
        for k, (s, e) in enumerate(rec.caption_spans):
            caption_mask[b, s:e] = 1.0
            lo, hi = (s - 1, s) if mode == "marker" else (s, e)
            pool_text[b, E + k, lo:hi] = 1.0 / (hi - lo)
            pool_vis[b, E + k, k * rows : (k + 1) * rows] = 1.0 / rows
    rgb = np.stack([np.stack([o.rgb for o in r.objects]) for r in records])
    depth = np.stack([np.stack([o.depth for o in r.objects]) for r in records])
    position = np.array([[o.position for o in r.objects] for r in records], dtype=np.float64)
    ps, ph, pt, pg, prefs = [], [], [], [], []
    for b, rec in enumerate(records):
        refs = rec.refs()
        for h, t, g in candidate_pairs(rec, config.pair_kinds, config.allow_self_pairs):
            if not 0 <= g < config.n_relations:
                raise enc.DataError(f"sample {rec.sample_id}: relation id {g} out of range")
            ps.append(b)
            ph.append(b * R + h)
            pt.append(b * R + t)
            pg.append(g)
            prefs.append((rec.sample_id, refs[h], refs[t]))
    return Batch(
        records, token_ids, caption_mask, rgb, depth, position, pool_text, pool_vis,
        np.array(ps, dtype=np.int64), np.array(ph, dtype=np.int64),
        np.array(pt, dtype=np.int64), np.array(pg, dtype=np.int64), prefs,
    )


@dataclass
class ForwardOutput:
    logits: Tensor  # [pairs, R]
    expert_weights: ExpertWeights
    mixed: MixedRepresentation
    text: MultilevelFeatures
    vision: MultilevelFeatures
    plans: dict  # {("text"|"vision", level): PlanBatch}


class RemoteModel:
    """Parameters plus the batched forward pass."""

    def __init__(self, config: RunConfig, seed: int | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init(rng)

    # -- parameters -----------------------------------------------------

    def _add(self, name: str, value, trainable: bool = True) -> None:
        self.params[name] = Tensor(value, requires_grad=trainable)

    def _init(self, rng: np.random.Generator) -> None:
        c = self.config
        d, L, P = c.d, c.L, c.patch_size
        frozen_text = c.freeze_text_encoder
        if c.text_encoder_init == "mixing":
            table, blocks = enc.mixing_text_init(rng, c.vocab_size, d, L, c.code_dims)
        else:
            table = rng.normal(0.0, 1.0, (c.vocab_size, d))
            blocks = [enc.init_block(rng, d, scale=c.init_scale) for _ in range(L - 1)]
        self._add("embed.table", table, not frozen_text)
        for j, blk in enumerate(blocks):
            for k, v in blk.items():
                self._add(f"text_encoder.{j}.{k}", v, not frozen_text)
        self._add("vision_patch.rgb", rng.normal(0.0, 1.0 / math.sqrt(3 * P * P), (3 * P * P, d)))
        self._add("vision_patch.depth", rng.normal(0.0, 1.0 / P, (P * P, d)))
        self._add("vision_patch.pos", rng.normal(0.0, 1.0 / math.sqrt(enc.POS_FEATURES), (enc.POS_FEATURES, d)))
        for j in range(L - 1):
            for k, v in enc.init_block(rng, d, scale=c.init_scale).items():
                self._add(f"vision_encoder.{j}.{k}", v)
        for mod in ("text", "vision"):
            for l in range(1, L):
                self._add(f"fusion.{mod}.{l}", np.zeros(d))
        s = 1.0 / math.sqrt(d)
        if c.mot_variant == "cross_attention":
            for mod in ("text", "vision"):
                for k in ("wq", "wk", "wh"):
                    self._add(f"mot_ca.{mod}.{k}", rng.normal(0.0, s, (d, d)))
        for direction in ("v2t", "t2v"):
            for k in ("wq", "wk", "wh"):
                self._add(f"cross_attention.{direction}.{k}", rng.normal(0.0, s, (d, d)))
        self._add("router.p_route", np.zeros((c.n_experts * d, c.n_experts)))
        for k, v in init_classifier(rng, d, c.hidden_width, c.n_relations).items():
            self._add(f"classifier.{k}", v)

    def group(self, prefix: str) -> dict:
        """Parameters under ``prefix.`` with the prefix stripped."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix + ".")}

    def trainable(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((k, v) for k, v in self.params.items() if v.requires_grad)

    def param_groups(self) -> dict:
        groups: dict = {}
        for name, p in self.trainable().items():
            groups.setdefault(name.split(".", 1)[0], []).append(name)
        return groups

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise enc.DataError(f"checkpoint lacks parameter {name}")
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise enc.DataError(f"parameter {name}: checkpoint shape {arr.shape}, model shape {p.shape}")
            p.data = arr.astype(p.dtype)
        extra = sorted(set(state) - set(self.params))
        if extra:
            raise enc.DataError(f"checkpoint has unexpected parameters: {', '.join(extra)}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # -- forward --------------------------------------------------------

    def embed_text(self, batch: Batch) -> Tensor:
        c = self.config
        table = self.params["embed.table"]
        x = table[batch.token_ids]
        B, n = batch.token_ids.shape
        if c.text_positional:
            pe = np.broadcast_to(enc.sinusoidal_text_positions(n, c.d), (B, n, c.d))
            x = x + Tensor(pe.astype(table.dtype))
        if not c.features.caption:
            keep = np.broadcast_to((1.0 - batch.caption_mask)[..., None], (B, n, c.d))
            x = x * Tensor(keep.astype(table.dtype))
        return x

    def encode(self, batch: Batch):
        c = self.config
        L = c.L
        text = enc.encode_multilevel(
            self.embed_text(batch), [self.group(f"text_encoder.{j}") for j in range(L - 1)], "text"
        )
        B, K = batch.rgb.shape[:2]
        H, W = batch.rgb.shape[2:4]
        v0 = enc.patchify_batch(
            batch.rgb.reshape(B * K, H, W, 3),
            batch.depth.reshape(B * K, H, W),
            batch.position.reshape(B * K, 4),
            c.patch_size,
            self.group("vision_patch"),
            use_position=c.features.position,
            use_depth=c.features.depth,
        )
        vision = enc.encode_multilevel(
            v0, [self.group(f"vision_encoder.{j}") for j in range(L - 1)], "vision"
        )
        return text, vision

    def forward(self, batch: Batch, training: bool = False, rng=None, frozen_plans: dict | None = None) -> ForwardOutput:
        c = self.config
        L, d = c.L, c.d
        text, vision = self.encode(batch)
        plans: dict = {}
        if not c.disable_mot:
            for name in ("text", "vision"):
                feats = text if name == "text" else vision
                frozen = None
                if frozen_plans is not None:
                    frozen = {l: pb for (m, l), pb in frozen_plans.items() if m == name}
                enhanced, pl = enhance_multilevel(
                    feats,
                    [self.params[f"fusion.{name}.{l}"] for l in range(1, L)],
                    lam=c.lam,
                    max_iter=c.sinkhorn_max_iter,
                    tol=c.sinkhorn_tol,
                    log_domain_below=c.log_domain_below,
                    variant=c.mot_variant,
                    ca_params=self.group(f"mot_ca.{name}") if c.mot_variant == "cross_attention" else None,
                    frozen_plans=frozen,
                )
                plans.update({(name, l): pb for l, pb in pl.items()})
                if name == "text":
                    text = enhanced
                else:
                    vision = enhanced
        B = batch.size
        K = batch.rgb.shape[1]
        rows = vision.top.shape[-2]
        vision_s = MultilevelFeatures([t.reshape(B, K * rows, d) for t in vision.layers], "vision")
        inter = interact(text, vision_s, self.group("cross_attention.v2t"), self.group("cross_attention.t2v"))
        experts = list(zip(expert_tags(L), inter.v_to_t + inter.t_to_v + [text.top, vision_s.top]))
        e = c.experts
        mask = expert_mask(L, t2v=e.t2v, v2t=e.v2t, t=e.t, v=e.v)
        weights = route(experts, self.params["router.p_route"], mask, uniform=c.disable_mmoe)
        mixed = mix(experts, weights)
        dtype = mixed.text_side.dtype
        ref_text = matmul(Tensor(batch.pool_text.astype(dtype)), mixed.text_side)
        ref_vis = matmul(Tensor(batch.pool_vis.astype(dtype)), mixed.vision_side)
        R = ref_text.shape[1]
        refs = concat([ref_text, ref_vis], axis=-1).reshape(B * R, 2 * d)
        x = concat([refs[batch.pair_head], refs[batch.pair_tail]], axis=-1)
        logits = classifier_logits(x, self.group("classifier"), c.dropout, rng, training)
        return ForwardOutput(logits, weights, mixed, text, vision_s, plans)
