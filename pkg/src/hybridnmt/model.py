"""Model assembly: the self-attention encoder, the Transformer decoder
(teacher/baseline), the hybrid GRU decoder, and the 1-layer GRU encoder kept
as the profiler's RNMT reference configuration.

Decoding state is functional: a decode step never mutates its inputs, it
returns a fresh state, so beam hypotheses can share ancestors freely.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .autodiff import Tensor
from .timing import ATTENTION, FFN, NULL_TIMER, SELF_OR_GRU, SOFTMAX
from .tokens import BOS_ID

DECODER_KINDS = ("transformer", "gru")
ATTENTION_KINDS = ("additive", "dot", "multihead")
ENCODER_KINDS = ("selfattn", "gru")


class ConfigError(ValueError):
    """Invalid architecture hyperparameters."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters; fully determines all parameter shapes.

    Defaults are the full-scale setup (512-dim model, 2048 filter, 8 heads,
    1024-dim GRU); tests and the self-test override to desk scale.
    """

    src_vocab: int
    tgt_vocab: int
    d_model: int = 512
    ffn_filter: int = 2048
    heads: int = 8
    enc_layers: int = 6
    dec_layers: int = 1
    decoder_kind: str = "gru"
    attention_kind: str = "additive"
    gru_hidden: int = 1024
    encoder_kind: str = "selfattn"

    def __post_init__(self):
        if self.decoder_kind not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention_kind {self.attention_kind!r}")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder_kind {self.encoder_kind!r}")
        for name in ("src_vocab", "tgt_vocab", "d_model", "ffn_filter", "heads",
                     "dec_layers", "gru_hidden"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.enc_layers < 0:
            raise ConfigError("enc_layers must be nonnegative")
        if self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.decoder_kind == "gru" and self.dec_layers != 1:
            raise ConfigError("the gru decoder is single-layer (dec_layers must be 1)")
        if self.src_vocab < 4 or self.tgt_vocab < 4:
            raise ConfigError("vocab sizes must cover the 4 reserved tokens")
        if self.encoder_kind == "gru":
            if self.decoder_kind != "gru":
                raise ConfigError("the gru encoder is only paired with the gru decoder "
                                  "(profiler reference configuration)")
            if self.enc_layers != 1:
                raise ConfigError("the gru encoder is single-layer")

    @property
    def enc_dim(self) -> int:
        """Width of encoder output rows (what attention keys/values see)."""
        return self.d_model if self.encoder_kind == "selfattn" else self.gru_hidden

    @property
    def context_dim(self) -> int:
        """Width of the source context vector fed to the GRU decoder."""
        return self.d_model if self.attention_kind == "multihead" else self.enc_dim

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class EncoderLayerParams:
    self_attn: L.MultiHeadParams
    ln1: LayerNormParams
    ffn: L.FFNParams
    ln2: LayerNormParams


@dataclass
class SelfAttnEncoderParams:
    embedding: Tensor
    layers: list


@dataclass
class GruEncoderParams:
    embedding: Tensor
    cell: L.GRUParams


@dataclass
class TransformerDecoderLayerParams:
    self_attn: L.MultiHeadParams
    ln1: LayerNormParams
    inter_attn: L.MultiHeadParams
    ln2: LayerNormParams
    ffn: L.FFNParams
    ln3: LayerNormParams


@dataclass
class TransformerDecoderParams:
    embedding: Tensor
    layers: list
    out_proj: Tensor


@dataclass
class DotAttnParams:
    bridge: Tensor | None


@dataclass
class GruDecoderParams:
    embedding: Tensor
    attn: object  # AdditiveAttnParams | DotAttnParams | MultiHeadParams
    cell: L.GRUParams
    init_w: Tensor
    init_b: Tensor
    out_w: Tensor
    out_b: Tensor


@dataclass
class ModelParams:
    encoder: object
    decoder: object


def iter_tensors(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Depth-first walk over every Tensor in a parameter container."""
    if isinstance(obj, Tensor):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_tensors(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_tensors(item, f"{prefix}.{i}")
    # ints / None terminate the walk


class _InitAlloc:
    """Allocates parameter tensors from a seeded generator."""

    def __init__(self, seed: int, d_model: int):
        self.rng = ad.make_rng(seed)
        self.d_model = d_model
        self.count = 0

    def weight(self, fan_in: int, fan_out: int, shape=None) -> Tensor:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        shape = shape or (fan_in, fan_out)
        self.count += int(np.prod(shape))
        return Tensor(self.rng.uniform(-limit, limit, size=shape))

    def vector(self, dim: int) -> Tensor:
        limit = math.sqrt(6.0 / (dim + 1))
        self.count += dim
        return Tensor(self.rng.uniform(-limit, limit, size=dim))

    def bias(self, dim: int) -> Tensor:
        self.count += dim
        return Tensor(np.zeros(dim))

    def gain(self, dim: int) -> Tensor:
        self.count += dim
        return Tensor(np.ones(dim))

    def embedding(self, vocab: int, dim: int) -> Tensor:
        self.count += vocab * dim
        return Tensor(self.rng.normal(0.0, 1.0 / math.sqrt(self.d_model), size=(vocab, dim)))


class _CountAlloc:
    """Shape-algebra twin of _InitAlloc: counts scalars, allocates nothing."""

    def __init__(self):
        self.count = 0

    def _tally(self, n: int):
        self.count += n
        return None

    def weight(self, fan_in, fan_out, shape=None):
        return self._tally(int(np.prod(shape)) if shape else fan_in * fan_out)

    def vector(self, dim):
        return self._tally(dim)

    def bias(self, dim):
        return self._tally(dim)

    def gain(self, dim):
        return self._tally(dim)

    def embedding(self, vocab, dim):
        return self._tally(vocab * dim)


def _make_mha(a, query_dim: int, kv_dim: int, model_dim: int, heads: int) -> L.MultiHeadParams:
    return L.MultiHeadParams(
        w_q=a.weight(query_dim, model_dim),
        w_k=a.weight(kv_dim, model_dim),
        w_v=a.weight(kv_dim, model_dim),
        w_o=a.weight(model_dim, model_dim),
        heads=heads,
    )


def _make_ln(a, dim: int) -> LayerNormParams:
    return LayerNormParams(gain=a.gain(dim), bias=a.bias(dim))


def _make_ffn(a, d_model: int, filt: int) -> L.FFNParams:
    return L.FFNParams(w1=a.weight(d_model, filt), b1=a.bias(filt),
                       w2=a.weight(filt, d_model), b2=a.bias(d_model))


def _make_gru(a, d_in: int, d_h: int) -> L.GRUParams:
    return L.GRUParams(
        w_z=a.weight(d_in, d_h), w_r=a.weight(d_in, d_h), w_h=a.weight(d_in, d_h),
        u_z=a.weight(d_h, d_h), u_r=a.weight(d_h, d_h), u_h=a.weight(d_h, d_h),
        b_z=a.bias(d_h), b_r=a.bias(d_h), b_h=a.bias(d_h),
    )


def _construct(cfg: ModelConfig, a) -> ModelParams:
    d = cfg.d_model
    if cfg.encoder_kind == "selfattn":
        enc_layers = [
            EncoderLayerParams(
                self_attn=_make_mha(a, d, d, d, cfg.heads),
                ln1=_make_ln(a, d),
                ffn=_make_ffn(a, d, cfg.ffn_filter),
                ln2=_make_ln(a, d),
            )
            for _ in range(cfg.enc_layers)
        ]
        encoder = SelfAttnEncoderParams(embedding=a.embedding(cfg.src_vocab, d), layers=enc_layers)
    else:
        encoder = GruEncoderParams(embedding=a.embedding(cfg.src_vocab, d),
                                   cell=_make_gru(a, d, cfg.gru_hidden))

    if cfg.decoder_kind == "transformer":
        dec_layers = [
            TransformerDecoderLayerParams(
                self_attn=_make_mha(a, d, d, d, cfg.heads),
                ln1=_make_ln(a, d),
                inter_attn=_make_mha(a, d, cfg.enc_dim, d, cfg.heads),
                ln2=_make_ln(a, d),
                ffn=_make_ffn(a, d, cfg.ffn_filter),
                ln3=_make_ln(a, d),
            )
            for _ in range(cfg.dec_layers)
        ]
        decoder = TransformerDecoderParams(
            embedding=a.embedding(cfg.tgt_vocab, d),
            layers=dec_layers,
            out_proj=a.weight(d, cfg.tgt_vocab),
        )
    else:
        if cfg.attention_kind == "additive":
            attn = L.AdditiveAttnParams(w_a=a.weight(cfg.gru_hidden, d),
                                        u_a=a.weight(cfg.enc_dim, d),
                                        v_a=a.vector(d))
        elif cfg.attention_kind == "dot":
            bridge = None if cfg.gru_hidden == cfg.enc_dim else a.weight(cfg.gru_hidden, cfg.enc_dim)
            attn = DotAttnParams(bridge=bridge)
        else:
            attn = _make_mha(a, cfg.gru_hidden, cfg.enc_dim, d, cfg.heads)
        readout_in = cfg.gru_hidden + cfg.context_dim + d
        decoder = GruDecoderParams(
            embedding=a.embedding(cfg.tgt_vocab, d),
            attn=attn,
            cell=_make_gru(a, d + cfg.context_dim, cfg.gru_hidden),
            init_w=a.weight(cfg.enc_dim, cfg.gru_hidden),
            init_b=a.bias(cfg.gru_hidden),
            out_w=a.weight(readout_in, cfg.tgt_vocab),
            out_b=a.bias(cfg.tgt_vocab),
        )
    return ModelParams(encoder=encoder, decoder=decoder)


def init_params(cfg: ModelConfig, seed: int) -> ModelParams:
    """Allocate and initialize all parameters; deterministic in the seed."""
    return _construct(cfg, _InitAlloc(seed, cfg.d_model))


def parameter_count(cfg: ModelConfig) -> int:
    """Total scalar parameter count, from shape algebra alone (no allocation)."""
    counter = _CountAlloc()
    _construct(cfg, counter)
    return counter.count


@dataclass
class DecodeOptions:
    """Inference-time optimization toggles; these change timing, never output."""

    precompute_kv: bool = True
    kv_cache: bool = True
    fused_weights: bool = True


@dataclass
class EncoderOutput:
    """Encoder states plus whatever per-sentence precomputation decoding uses."""

    states: Tensor
    precomputed_kv: list | None = None      # per consumer attention site: (K, V)
    additive_table: Tensor | None = None    # U_a @ enc for the additive decoder


@dataclass
class _FusedPlan:
    """Weight matrices combined once per decode so steps launch fewer matmuls."""

    gru_w: Tensor | None = None
    gru_u: Tensor | None = None
    dec_qkv: list | None = None        # per transformer layer: [W_Q|W_K|W_V]
    dec_inter_kv: list | None = None   # per transformer layer: [W_K|W_V]


@dataclass
class DecodeContext:
    enc_out: EncoderOutput
    opts: DecodeOptions
    plan: _FusedPlan | None


@dataclass
class GruState:
    """Constant-size decoder state: the hidden vector and the last token fed in."""

    hidden: np.ndarray
    last_id: int

    def cache_floats(self) -> int:
        return self.hidden.size


@dataclass
class TransformerState:
    """Per-layer self-attention caches over all generated positions."""

    keys: list      # per layer ndarray [t x d_model], or None before step 1
    values: list
    step: int
    prefix: list | None = None  # generated input ids; kept only when kv_cache is off

    def cache_floats(self) -> int:
        return sum(k.size for k in self.keys if k is not None) + \
            sum(v.size for v in self.values if v is not None)


class Model:
    """A configuration plus its parameters, with encode/decode entry points."""

    def __init__(self, cfg: ModelConfig, params: ModelParams):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> "Model":
        return cls(cfg, init_params(cfg, seed))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(iter_tensors(self.params))

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_trainable(self, flag: bool = True) -> "Model":
        for t in self.parameters():
            t.requires_grad = flag
        return self

    def freeze(self) -> "Model":
        """Detach from training: no parameter will ever record gradients."""
        return self.set_trainable(False)

    # ---------------- encoding ----------------

    def encode(self, src_ids: Sequence[int], fused: bool = False, timer=None) -> Tensor:
        """Source ids -> encoder states [L x enc_dim]."""
        if len(src_ids) == 0:
            raise ValueError("encode: empty source sentence")
        if self.cfg.encoder_kind == "selfattn":
            return self._encode_selfattn(src_ids, fused)
        return self._encode_gru(src_ids)

    def _encode_selfattn(self, src_ids, fused: bool) -> Tensor:
        cfg, enc = self.cfg, self.params.encoder
        x = ad.scale(L.embed(enc.embedding, src_ids), math.sqrt(cfg.d_model))
        x = ad.add(x, L.positional_signal(len(src_ids), cfg.d_model))
        for layer in enc.layers:
            attn = L.multi_head_self_attention(layer.self_attn, x, mask=None, fused=fused)
            x = ad.layer_norm(ad.add(x, attn), layer.ln1.gain, layer.ln1.bias)
            f = L.ffn(layer.ffn, x)
            x = ad.layer_norm(ad.add(x, f), layer.ln2.gain, layer.ln2.bias)
        return x

    def _encode_gru(self, src_ids) -> Tensor:
        enc = self.params.encoder
        emb = L.embed(enc.embedding, src_ids)
        h = Tensor(np.zeros(self.cfg.gru_hidden))
        rows = []
        for t in range(len(src_ids)):
            h = L.gru_cell(enc.cell, ad.reshape(ad.narrow(emb, 0, t, t + 1), (self.cfg.d_model,)), h)
            rows.append(ad.reshape(h, (1, self.cfg.gru_hidden)))
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)

    # ---------------- decode preparation ----------------

    def prepare_decoding(self, src_ids: Sequence[int],
                         opts: DecodeOptions | None = None, timer=None,
                         plan: "_FusedPlan | None" = None) -> DecodeContext:
        """Encode plus the per-sentence precompute/fusion the optimizations need.

        ``plan`` lets callers decoding many sentences against frozen parameters
        reuse one fused-weight plan (see ``build_plan``)."""
        cfg = self.cfg
        opts = opts or DecodeOptions()
        timer = timer or NULL_TIMER
        states = self.encode(src_ids, fused=opts.fused_weights, timer=timer)
        enc_out = EncoderOutput(states=states)
        dec = self.params.decoder
        if opts.precompute_kv:
            if cfg.decoder_kind == "transformer":
                enc_out.precomputed_kv = [L.project_kv(layer.inter_attn, states)
                                          for layer in dec.layers]
            elif cfg.attention_kind == "multihead":
                enc_out.precomputed_kv = [L.project_kv(dec.attn, states)]
        if cfg.decoder_kind == "gru" and cfg.attention_kind == "additive":
            # the additive score table is always precomputed; the flag governs K/V only
            enc_out.additive_table = ad.matmul(states, dec.attn.u_a)
        if plan is None:
            plan = self.build_plan(opts)
        return DecodeContext(enc_out=enc_out, opts=opts, plan=plan)

    def build_plan(self, opts: DecodeOptions) -> "_FusedPlan | None":
        """Combine weight matrices for decoding. Valid until parameters change."""
        if not opts.fused_weights:
            return None
        dec = self.params.decoder
        plan = _FusedPlan()
        if self.cfg.decoder_kind == "gru":
            plan.gru_w, plan.gru_u = L.fuse_gru(dec.cell)
        else:
            plan.dec_qkv = [ad.concat([l.self_attn.w_q, l.self_attn.w_k, l.self_attn.w_v], axis=1)
                            for l in dec.layers]
            if not opts.precompute_kv:
                plan.dec_inter_kv = [ad.concat([l.inter_attn.w_k, l.inter_attn.w_v], axis=1)
                                     for l in dec.layers]
        return plan

    def initial_state(self, ctx: DecodeContext):
        if self.cfg.decoder_kind == "gru":
            return GruState(hidden=self._initial_hidden(ctx.enc_out.states).data,
                            last_id=BOS_ID)
        n = len(self.params.decoder.layers)
        return TransformerState(keys=[None] * n, values=[None] * n, step=0,
                                prefix=None if ctx.opts.kv_cache else [])

    def _initial_hidden(self, enc_states: Tensor) -> Tensor:
        dec = self.params.decoder
        length = enc_states.shape[0]
        pool = ad.matmul(Tensor(np.full(length, 1.0 / length)), enc_states)
        return ad.tanh(ad.add(ad.matmul(pool, dec.init_w), dec.init_b))

    # ---------------- incremental decoding ----------------

    def decode_step(self, ctx: DecodeContext, state, prev_id: int, timer=None):
        """One decoding step: (logits over tgt_vocab as ndarray, new state)."""
        timer = timer or NULL_TIMER
        if self.cfg.decoder_kind == "gru":
            return self._decode_step_gru(ctx, state, prev_id, timer)
        if ctx.opts.kv_cache:
            return self._decode_step_transformer_cached(ctx, state, prev_id, timer)
        return self._decode_step_transformer_recompute(ctx, state, prev_id, timer)

    # The cached decode steps below run in plain numpy: incremental decoding
    # needs no gradients, and the taped teacher-forced forward is the oracle
    # these paths are tested against (stepwise == full forward within 1e-8).

    def _attend_gru(self, ctx: DecodeContext, hidden: np.ndarray, timer) -> np.ndarray:
        cfg, dec = self.cfg, self.params.decoder
        enc_out = ctx.enc_out
        with timer.scope(ATTENTION):
            if cfg.attention_kind == "additive":
                p = dec.attn
                if enc_out.additive_table is not None:
                    u_enc = enc_out.additive_table.data
                else:
                    u_enc = enc_out.states.data @ p.u_a.data
                scores = np.tanh(u_enc + hidden @ p.w_a.data) @ p.v_a.data
                scores -= scores.max()
                np.exp(scores, out=scores)
                scores /= scores.sum()
                return scores @ enc_out.states.data
            if cfg.attention_kind == "dot":
                enc = enc_out.states.data
                query = hidden if dec.attn.bridge is None else hidden @ dec.attn.bridge.data
                scores = enc @ query / math.sqrt(enc.shape[-1])
                scores -= scores.max()
                np.exp(scores, out=scores)
                scores /= scores.sum()
                return scores @ enc
            p = dec.attn
            q = hidden @ p.w_q.data
            if enc_out.precomputed_kv is not None:
                pre_k, pre_v = enc_out.precomputed_kv[0]
                pre_k, pre_v = pre_k.data, pre_v.data
            else:
                pre_k = enc_out.states.data @ p.w_k.data
                pre_v = enc_out.states.data @ p.w_v.data
            return L.attend_single_query(q, pre_k, pre_v, p.heads) @ p.w_o.data

    def _decode_step_gru(self, ctx: DecodeContext, state: GruState, prev_id: int, timer):
        cfg, dec = self.cfg, self.params.decoder
        self._check_tgt_id(prev_id)
        emb = dec.embedding.data[prev_id]
        h_prev = state.hidden
        context = self._attend_gru(ctx, h_prev, timer)
        x = np.concatenate([emb, context])
        with timer.scope(SELF_OR_GRU):
            cell = dec.cell
            n = cell.hidden_dim
            if ctx.plan is not None and ctx.plan.gru_w is not None:
                xw = x @ ctx.plan.gru_w.data
                hu = h_prev @ ctx.plan.gru_u.data
                z = L.sigmoid_np(xw[:n] + hu[:n] + cell.b_z.data)
                r = L.sigmoid_np(xw[n:2 * n] + hu[n:2 * n] + cell.b_r.data)
                cand = np.tanh(xw[2 * n:] + cell.b_h.data + r * hu[2 * n:])
            else:
                z = L.sigmoid_np(x @ cell.w_z.data + h_prev @ cell.u_z.data + cell.b_z.data)
                r = L.sigmoid_np(x @ cell.w_r.data + h_prev @ cell.u_r.data + cell.b_r.data)
                cand = np.tanh(x @ cell.w_h.data + cell.b_h.data + r * (h_prev @ cell.u_h.data))
            hidden = (1.0 - z) * h_prev + z * cand
        with timer.scope(SOFTMAX):
            readout = np.concatenate([hidden, context, emb])
            logits = readout @ dec.out_w.data + dec.out_b.data
        ad.check_finite(logits, "decode_step")
        return logits, GruState(hidden=hidden, last_id=prev_id)

    def _check_tgt_id(self, token_id: int) -> None:
        if not 0 <= token_id < self.cfg.tgt_vocab:
            raise IndexError(f"token id {token_id} out of range for vocab {self.cfg.tgt_vocab}")

    def _inter_kv_np(self, ctx: DecodeContext, layer, layer_idx: int):
        if ctx.enc_out.precomputed_kv is not None:
            pre_k, pre_v = ctx.enc_out.precomputed_kv[layer_idx]
            return pre_k.data, pre_v.data
        states = ctx.enc_out.states.data
        if ctx.plan is not None and ctx.plan.dec_inter_kv is not None:
            d = self.cfg.d_model
            kv = states @ ctx.plan.dec_inter_kv[layer_idx].data
            return kv[:, :d], kv[:, d:]
        return states @ layer.inter_attn.w_k.data, states @ layer.inter_attn.w_v.data

    @staticmethod
    def _ln_np(x: np.ndarray, ln: LayerNormParams, eps: float = 1e-5) -> np.ndarray:
        centered = x - x.mean()
        var = np.mean(centered * centered)
        return centered / math.sqrt(var + eps) * ln.gain.data + ln.bias.data

    def _decode_step_transformer_cached(self, ctx: DecodeContext, state: TransformerState,
                                        prev_id: int, timer):
        cfg, dec = self.cfg, self.params.decoder
        d = cfg.d_model
        self._check_tgt_id(prev_id)
        x = dec.embedding.data[prev_id] * math.sqrt(d) + L.positional_row(state.step, d).data
        new_keys, new_values = [], []
        plan = ctx.plan
        for i, layer in enumerate(dec.layers):
            p = layer.self_attn
            with timer.scope(SELF_OR_GRU):
                if plan is not None and plan.dec_qkv is not None:
                    qkv = x @ plan.dec_qkv[i].data
                    q, k_new, v_new = qkv[:d], qkv[d:2 * d], qkv[2 * d:]
                else:
                    q, k_new, v_new = x @ p.w_q.data, x @ p.w_k.data, x @ p.w_v.data
                if state.keys[i] is None:
                    k_all, v_all = k_new.reshape(1, d), v_new.reshape(1, d)
                else:
                    k_all = np.concatenate([state.keys[i], k_new.reshape(1, d)])
                    v_all = np.concatenate([state.values[i], v_new.reshape(1, d)])
                attn = L.attend_single_query(q, k_all, v_all, cfg.heads) @ p.w_o.data
            new_keys.append(k_all)
            new_values.append(v_all)
            x = self._ln_np(x + attn, layer.ln1)
            with timer.scope(ATTENTION):
                pre_k, pre_v = self._inter_kv_np(ctx, layer, i)
                q2 = x @ layer.inter_attn.w_q.data
                inter = L.attend_single_query(q2, pre_k, pre_v, cfg.heads) \
                    @ layer.inter_attn.w_o.data
            x = self._ln_np(x + inter, layer.ln2)
            with timer.scope(FFN):
                f = np.maximum(x @ layer.ffn.w1.data + layer.ffn.b1.data, 0.0) \
                    @ layer.ffn.w2.data + layer.ffn.b2.data
            x = self._ln_np(x + f, layer.ln3)
        with timer.scope(SOFTMAX):
            logits = x @ dec.out_proj.data
        ad.check_finite(logits, "decode_step")
        return logits, TransformerState(keys=new_keys, values=new_values,
                                        step=state.step + 1, prefix=None)

    def _decode_step_transformer_recompute(self, ctx: DecodeContext, state: TransformerState,
                                           prev_id: int, timer):
        # kv cache disabled: rerun the decoder stack over the whole prefix
        prefix = (state.prefix or []) + [prev_id]
        logits = self._transformer_decoder_forward(ctx.enc_out.states, prefix,
                                                   precomputed_kv=ctx.enc_out.precomputed_kv,
                                                   plan=ctx.plan, timer=timer)
        n = len(self.params.decoder.layers)
        new_state = TransformerState(keys=[None] * n, values=[None] * n,
                                     step=state.step + 1, prefix=prefix)
        return logits.data[-1], new_state

    # ---------------- full (teacher-forced) forward passes ----------------

    def forward_teacher_forced(self, src_ids: Sequence[int], tgt_in: Sequence[int]) -> Tensor:
        """Logits [T x tgt_vocab]; row t is the next-token distribution after
        consuming tgt_in[:t+1]. ``tgt_in`` must begin with BOS."""
        if len(tgt_in) == 0:
            raise ValueError("forward_teacher_forced: empty target")
        if tgt_in[0] != BOS_ID:
            raise ValueError("forward_teacher_forced: target input must begin with BOS")
        enc_states = self.encode(src_ids)
        if self.cfg.decoder_kind == "transformer":
            return self._transformer_decoder_forward(enc_states, tgt_in)
        return self._gru_decoder_forward(enc_states, tgt_in)

    def _transformer_decoder_forward(self, enc_states: Tensor, tgt_in: Sequence[int],
                                     precomputed_kv=None, plan=None, timer=None) -> Tensor:
        cfg, dec = self.cfg, self.params.decoder
        timer = timer or NULL_TIMER
        T, d = len(tgt_in), cfg.d_model
        x = ad.scale(L.embed(dec.embedding, tgt_in), math.sqrt(d))
        x = ad.add(x, L.positional_signal(T, d))
        mask = L.causal_mask(T)
        fused = plan is not None and plan.dec_qkv is not None
        for i, layer in enumerate(dec.layers):
            with timer.scope(SELF_OR_GRU):
                attn = L.multi_head_self_attention(layer.self_attn, x, mask, fused=fused)
            x = ad.layer_norm(ad.add(x, attn), layer.ln1.gain, layer.ln1.bias)
            with timer.scope(ATTENTION):
                if precomputed_kv is not None:
                    pre_k, pre_v = precomputed_kv[i]
                    inter = L.multi_head_attention_cached(layer.inter_attn, x, pre_k, pre_v)
                else:
                    inter = L.multi_head_attention(layer.inter_attn, x, enc_states)
            x = ad.layer_norm(ad.add(x, inter), layer.ln2.gain, layer.ln2.bias)
            with timer.scope(FFN):
                f = L.ffn(layer.ffn, x)
            x = ad.layer_norm(ad.add(x, f), layer.ln3.gain, layer.ln3.bias)
        with timer.scope(SOFTMAX):
            logits = ad.matmul(x, dec.out_proj)
        return logits

    def _gru_decoder_forward(self, enc_states: Tensor, tgt_in: Sequence[int]) -> Tensor:
        cfg, dec = self.cfg, self.params.decoder
        hidden = self._initial_hidden(enc_states)
        additive_table = None
        if cfg.attention_kind == "additive":
            additive_table = ad.matmul(enc_states, dec.attn.u_a)
        emb_all = L.embed(dec.embedding, tgt_in)
        rows = []
        for t in range(len(tgt_in)):
            emb = ad.reshape(ad.narrow(emb_all, 0, t, t + 1), (cfg.d_model,))
            if cfg.attention_kind == "additive":
                context, _ = L.additive_attention_pre(dec.attn, hidden, additive_table, enc_states)
            elif cfg.attention_kind == "dot":
                context, _ = L.dot_attention(hidden, enc_states, bridge=dec.attn.bridge)
            else:
                out = L.multi_head_attention(dec.attn, ad.reshape(hidden, (1, cfg.gru_hidden)),
                                             enc_states)
                context = ad.reshape(out, (cfg.d_model,))
            hidden = L.gru_cell(dec.cell, ad.concat([emb, context], axis=0), hidden)
            readout = ad.concat([hidden, context, emb], axis=0)
            logits = ad.add(ad.matmul(readout, dec.out_w), dec.out_b)
            rows.append(ad.reshape(logits, (1, cfg.tgt_vocab)))
        return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
