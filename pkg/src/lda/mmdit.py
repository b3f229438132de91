"""Multi-modal flow-matching transformer.

Joint velocity prediction for noisy action chunks and noisy future visual
latents. Per block: modality-specific AdaLN (scale/shift/gate produced
from that modality's timestep-plus-task embedding, zero-initialized),
shared softmax self-attention over [history | action | vision] tokens with
per-expert QKV/output projections, un-modulated cross-attention to
instruction tokens, and per-expert FFNs. Absent modalities are replaced by
a learned register vector broadcast over the modality's token positions
(with its positional encodings), so the computation never touches the
caller's array for that modality.

Forward and backward are written directly against numpy; both are pure
functions of (parameters, inputs) and dtype-generic (float64 is used by
the finite-difference gradient checks, float32 for training).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import INSTR_LEN, N_TASK_MODES, VOCAB, ModelConfig, TaskMode
from .errors import CompatibilityError, CorruptionError, MigrationError, RoutingError
from .rng import STREAM_INIT, philox

CHECKPOINT_MAGIC = b"LDACKPT1"
CHECKPOINT_VERSION = 1

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


# --- small op kernels (forward + backward pairs) -----------------------------

def _layernorm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    return y, inv


def _layernorm_back(dy, y, inv):
    m1 = dy.mean(axis=-1, keepdims=True)
    m2 = (dy * y).mean(axis=-1, keepdims=True)
    return (dy - m1 - y * m2) * inv


def _gelu(x):
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return 0.5 * x * (1.0 + t), t


def _gelu_back(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _softmax(s):
    # in place: the raw-score tensor is large and never needed afterwards
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _softmax_back(da, a):
    # consumes da in place (always a fresh tensor at the call sites)
    da -= (da * a).sum(axis=-1, keepdims=True)
    da *= a
    return da


def sinusoidal_embedding(tau: np.ndarray, dim: int, periods=(1e-2, 1e2)) -> np.ndarray:
    """[sin(w tau) | cos(w tau)] over geometric frequencies.

    Periods span `periods` of the unit interval; at tau = 0 the embedding
    is exactly [0, ..., 0, 1, ..., 1].
    """
    tau = np.asarray(tau, dtype=np.float64)
    half = dim // 2
    p = np.geomspace(periods[0], periods[1], half)
    ang = tau[..., None] * (2.0 * np.pi / p)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def temporal_phase(offsets, dim: int) -> np.ndarray:
    """Shared temporal phase encoding over integer step offsets.

    An action token producing step t and a frame token at step t receive
    the same phase vector.
    """
    offs = np.asarray(offsets, dtype=np.float64)
    half = dim // 2
    p = np.geomspace(2.0, 64.0, half)
    ang = offs[..., None] * (2.0 * np.pi / p)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


# --- batch container -----------------------------------------------------------

@dataclass
class TokenBatch:
    """Inputs to one forward pass. Arrays at rows whose presence flag is
    False are never read (register substitution)."""

    hist_latents: np.ndarray      # (B, hist, P, D)
    hist_actions: np.ndarray      # (B, hist, A)
    hist_actions_present: np.ndarray  # (B,) bool
    actions: np.ndarray           # (B, K, A)
    actions_present: np.ndarray   # (B,) bool
    latents: np.ndarray           # (B, F, P, D)
    latents_present: np.ndarray   # (B,) bool
    tau_a: np.ndarray             # (B,)
    tau_o: np.ndarray             # (B,)
    modes: np.ndarray             # (B,) int
    instr_ids: np.ndarray         # (B, L) int

    @property
    def batch_size(self) -> int:
        return len(self.modes)


_REQUIRED_PRESENCE = {
    TaskMode.POLICY: (True, False),
    TaskMode.FORWARD_DYN: (True, True),
    TaskMode.INVERSE_DYN: (True, True),
    TaskMode.VISUAL_FORECAST: (False, True),
}


def validate_routing(batch: TokenBatch):
    for r in range(batch.batch_size):
        mode = TaskMode(int(batch.modes[r]))
        want_a, want_o = _REQUIRED_PRESENCE[mode]
        if bool(batch.actions_present[r]) != want_a or bool(batch.latents_present[r]) != want_o:
            raise RoutingError(
                f"row {r}: mode {mode.name} requires actions_present={want_a}, "
                f"latents_present={want_o}; got {bool(batch.actions_present[r])}, "
                f"{bool(batch.latents_present[r])}"
            )


# --- the model ------------------------------------------------------------------

class MMDiT:
    def __init__(self, config: ModelConfig, params: Optional[dict] = None,
                 dtype=np.float32):
        self.config = config
        self.dtype = dtype
        self.params = params if params is not None else init_params(config, dtype=dtype)
        c = config
        hp = c.history_len * c.patch_count
        self.sl_hv = slice(0, hp)
        self.sl_ha = slice(hp, hp + c.history_len)
        self.sl_ac = slice(hp + c.history_len, hp + c.history_len + c.chunk_len)
        self.sl_vi = slice(hp + c.history_len + c.chunk_len, c.n_tokens)
        self.sl_act_expert = slice(hp, hp + c.history_len + c.chunk_len)
        # fixed temporal phases
        self._phase_hist = temporal_phase(
            np.arange(-c.history_len + 1, 1), c.d_model
        )  # (-1, 0) for history_len 2
        self._phase_action = temporal_phase(np.arange(1, c.chunk_len + 1), c.d_model)
        self._phase_future = temporal_phase(np.asarray(c.future_offsets), c.d_model)

    # -- embeddings ------------------------------------------------------------

    def timestep_task_embedding(self, tau, mode) -> np.ndarray:
        """Sinusoidal embedding of tau plus the learned task embedding."""
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(tau < 0.0) or np.any(tau > 1.0):
            raise ValueError(f"tau must lie in [0, 1], got {tau}")
        emb = sinusoidal_embedding(tau, self.config.d_model)
        task = self.params["task_embed"][np.asarray(mode, dtype=int)]
        return (emb + task).astype(task.dtype)

    def _conditioning(self, batch: TokenBatch):
        p = self.params
        sin_a = sinusoidal_embedding(batch.tau_a, self.config.d_model)
        sin_o = sinusoidal_embedding(batch.tau_o, self.config.d_model)
        task = p["task_embed"][batch.modes.astype(int)]
        c_a = (sin_a + task).astype(p["task_embed"].dtype)
        c_o = (sin_o + task).astype(p["task_embed"].dtype)
        c_h = 0.5 * (c_a + c_o)
        return c_a, c_o, c_h

    # -- token assembly ----------------------------------------------------------

    def _build_tokens(self, batch: TokenBatch):
        c, p = self.config, self.params
        B = batch.batch_size
        d = c.d_model
        dt = p["vis_in_w"].dtype

        hv = batch.hist_latents.astype(dt) @ p["vis_in_w"] + p["vis_in_b"]
        hv = hv + p["pos_patch"][None, None] + p["pos_hist_frame"][None, :, None]
        hv = hv + self._phase_hist[None, :, None].astype(dt)
        hv = hv.reshape(B, c.history_len * c.patch_count, d)

        ha = np.empty((B, c.history_len, d), dtype=dt)
        pres = batch.hist_actions_present.astype(bool)
        if pres.any():
            ha[pres] = batch.hist_actions[pres].astype(dt) @ p["act_in_w"] + p["act_in_b"]
        if (~pres).any():
            ha[~pres] = p["reg_action"][None, None]
        ha = ha + p["pos_hist_act"][None] + self._phase_hist[None].astype(dt)

        ac = np.empty((B, c.chunk_len, d), dtype=dt)
        apres = batch.actions_present.astype(bool)
        if apres.any():
            ac[apres] = batch.actions[apres].astype(dt) @ p["act_in_w"] + p["act_in_b"]
        if (~apres).any():
            ac[~apres] = p["reg_action"][None, None]
        ac = ac + p["pos_action"][None] + self._phase_action[None].astype(dt)

        F = c.n_future_frames
        vi = np.empty((B, F, c.patch_count, d), dtype=dt)
        vpres = batch.latents_present.astype(bool)
        if vpres.any():
            vi[vpres] = batch.latents[vpres].astype(dt) @ p["vis_in_w"] + p["vis_in_b"]
        if (~vpres).any():
            vi[~vpres] = p["reg_vision"][None, None, None]
        vi = vi + p["pos_patch"][None, None] + self._phase_future[None, :, None].astype(dt)
        vi = vi.reshape(B, F * c.patch_count, d)

        x = np.concatenate([hv, ha, ac, vi], axis=1)
        cache = {"apres": apres, "vpres": vpres, "hpres": pres}
        return x, cache

    def _instruction_tokens(self, instr_ids):
        p = self.params
        return p["instr_embed"][instr_ids] + p["instr_pos"][None]

    # -- attention helpers ---------------------------------------------------------

    def _split_heads(self, x):
        B, T, d = x.shape
        H = self.config.n_heads
        return x.reshape(B, T, H, d // H).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        B, H, T, hd = x.shape
        return x.transpose(0, 2, 1, 3).reshape(B, T, H * hd)

    # -- forward ---------------------------------------------------------------------

    def forward(self, batch: TokenBatch, need_cache: bool = False,
                collect_attention: Optional[int] = None):
        """Velocity heads (v_a, v_o); optionally a backward cache and/or the
        post-softmax self-attention of one layer."""
        validate_routing(batch)
        self._check_shapes(batch)
        c, p = self.config, self.params
        B = batch.batch_size
        H, d = c.n_heads, c.d_model
        hd = d // H
        scale = 1.0 / np.sqrt(hd)

        c_a, c_o, c_h = self._conditioning(batch)
        x, tok_cache = self._build_tokens(batch)
        instr = self._instruction_tokens(batch.instr_ids)
        groups = (  # (slice, expert, conditioning tag)
            (self.sl_hv, "v", "h"),
            (self.sl_ha, "a", "h"),
            (self.sl_ac, "a", "a"),
            (self.sl_vi, "v", "o"),
        )
        conds = {"a": c_a, "o": c_o, "h": c_h}
        cache = {
            "tok": tok_cache, "x0": x, "instr": instr,
            "c_a": c_a, "c_o": c_o, "c_h": c_h, "layers": [],
            "batch": batch,
        } if need_cache else None
        attn_maps = None

        for li in range(c.n_layers):
            lc = {}
            # AdaLN modulation per group
            mods = {}
            for sl, ex, ct in groups:
                m = conds[ct] @ p[f"L{li}_{ex}_mod_w"] + p[f"L{li}_{ex}_mod_b"]
                mods[(ex, ct)] = np.split(m, 6, axis=-1)

            ln1, inv1 = _layernorm(x)
            xm = np.empty_like(ln1)
            for sl, ex, ct in groups:
                sh, sc = mods[(ex, ct)][0], mods[(ex, ct)][1]
                xm[:, sl] = ln1[:, sl] * (1.0 + sc[:, None]) + sh[:, None]

            qkv = np.empty((B, c.n_tokens, 3 * d), dtype=x.dtype)
            qkv[:, self.sl_act_expert] = (
                xm[:, self.sl_act_expert] @ p[f"L{li}_a_qkv_w"] + p[f"L{li}_a_qkv_b"]
            )
            for sl in (self.sl_hv, self.sl_vi):
                qkv[:, sl] = xm[:, sl] @ p[f"L{li}_v_qkv_w"] + p[f"L{li}_v_qkv_b"]
            q, k, v = (self._split_heads(a) for a in np.split(qkv, 3, axis=-1))
            kt = np.ascontiguousarray(k.transpose(0, 1, 3, 2))
            s = (q @ kt) * scale
            a = _softmax(s)
            if collect_attention == li:
                attn_maps = a.copy()
            merged = self._merge_heads(a @ v)
            attn_out = np.empty_like(merged)
            attn_out[:, self.sl_act_expert] = (
                merged[:, self.sl_act_expert] @ p[f"L{li}_a_out_w"] + p[f"L{li}_a_out_b"]
            )
            for sl in (self.sl_hv, self.sl_vi):
                attn_out[:, sl] = merged[:, sl] @ p[f"L{li}_v_out_w"] + p[f"L{li}_v_out_b"]
            x_attn_in = x
            x = x.copy()
            for sl, ex, ct in groups:
                x[:, sl] += mods[(ex, ct)][2][:, None] * attn_out[:, sl]

            # cross-attention to instruction tokens (not AdaLN-modulated)
            xcn, invx = _layernorm(x)
            xc = xcn * p[f"L{li}_x_ln_g"] + p[f"L{li}_x_ln_b"]
            qx = self._split_heads(xc @ p[f"L{li}_x_q_w"] + p[f"L{li}_x_q_b"])
            kx = self._split_heads(instr @ p[f"L{li}_x_k_w"] + p[f"L{li}_x_k_b"])
            vx = self._split_heads(instr @ p[f"L{li}_x_v_w"] + p[f"L{li}_x_v_b"])
            sx = (qx @ kx.transpose(0, 1, 3, 2)) * scale
            ax = _softmax(sx)
            mx = self._merge_heads(ax @ vx)
            x_cross_in = x
            x = x + (mx @ p[f"L{li}_x_out_w"] + p[f"L{li}_x_out_b"])

            # FFN with the second AdaLN triple
            ln2, inv2 = _layernorm(x)
            xm2 = np.empty_like(ln2)
            for sl, ex, ct in groups:
                sh, sc = mods[(ex, ct)][3], mods[(ex, ct)][4]
                xm2[:, sl] = ln2[:, sl] * (1.0 + sc[:, None]) + sh[:, None]
            h1 = np.empty((B, c.n_tokens, c.ffn_mult * d), dtype=x.dtype)
            h1[:, self.sl_act_expert] = (
                xm2[:, self.sl_act_expert] @ p[f"L{li}_a_ffn1_w"] + p[f"L{li}_a_ffn1_b"]
            )
            for sl in (self.sl_hv, self.sl_vi):
                h1[:, sl] = xm2[:, sl] @ p[f"L{li}_v_ffn1_w"] + p[f"L{li}_v_ffn1_b"]
            g1, tanh1 = _gelu(h1)
            ff = np.empty((B, c.n_tokens, d), dtype=x.dtype)
            ff[:, self.sl_act_expert] = (
                g1[:, self.sl_act_expert] @ p[f"L{li}_a_ffn2_w"] + p[f"L{li}_a_ffn2_b"]
            )
            for sl in (self.sl_hv, self.sl_vi):
                ff[:, sl] = g1[:, sl] @ p[f"L{li}_v_ffn2_w"] + p[f"L{li}_v_ffn2_b"]
            x_ffn_in = x
            x = x.copy()
            for sl, ex, ct in groups:
                x[:, sl] += mods[(ex, ct)][5][:, None] * ff[:, sl]

            if need_cache:
                lc.update(
                    mods=mods, ln1=ln1, inv1=inv1, xm=xm, q=q, k=k, v=v, a=a,
                    merged=merged, attn_out=attn_out, x_attn_in=x_attn_in,
                    xcn=xcn, invx=invx, xc=xc, qx=qx, kx=kx, vx=vx, ax=ax, mx=mx,
                    x_cross_in=x_cross_in, ln2=ln2, inv2=inv2, xm2=xm2, h1=h1,
                    tanh1=tanh1, g1=g1, ff=ff, x_ffn_in=x_ffn_in,
                )
                cache["layers"].append(lc)

        ya_n, inv_a = _layernorm(x[:, self.sl_ac])
        ya = ya_n * p["ln_act_g"] + p["ln_act_b"]
        v_a = ya @ p["head_act_w"] + p["head_act_b"]
        yo_n, inv_o = _layernorm(x[:, self.sl_vi])
        yo = yo_n * p["ln_vis_g"] + p["ln_vis_b"]
        v_o = (yo @ p["head_vis_w"] + p["head_vis_b"]).reshape(
            B, c.n_future_frames, c.patch_count, c.latent_dim
        )
        if need_cache:
            cache.update(x_final=x, ya_n=ya_n, inv_a=inv_a, ya=ya,
                         yo_n=yo_n, inv_o=inv_o, yo=yo)
        if collect_attention is not None:
            return v_a, v_o, cache, attn_maps
        if need_cache:
            return v_a, v_o, cache
        return v_a, v_o

    # -- backward ---------------------------------------------------------------------

    def backward(self, cache: dict, dv_a: np.ndarray, dv_o: np.ndarray):
        """Gradients of a scalar loss given d(loss)/d(v_a), d(loss)/d(v_o).

        Returns (param_grads, input_grads); input_grads carries d/d(actions),
        d/d(latents), d/d(hist_latents), d/d(hist_actions).
        """
        c, p = self.config, self.params
        batch: TokenBatch = cache["batch"]
        B = batch.batch_size
        H, d = c.n_heads, c.d_model
        hd = d // H
        scale = 1.0 / np.sqrt(hd)
        groups = (
            (self.sl_hv, "v", "h"),
            (self.sl_ha, "a", "h"),
            (self.sl_ac, "a", "a"),
            (self.sl_vi, "v", "o"),
        )
        g = {name: np.zeros_like(arr) for name, arr in p.items()}
        dc = {"a": 0.0, "o": 0.0, "h": 0.0}

        def lin_back(dout, x_in, wname, bname, g):
            g[wname] += x_in.reshape(-1, x_in.shape[-1]).T @ dout.reshape(-1, dout.shape[-1])
            g[bname] += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
            return dout @ p[wname].T

        # heads
        dv_o2 = dv_o.reshape(B, -1, c.latent_dim)
        dyo = dv_o2 @ p["head_vis_w"].T
        g["head_vis_w"] += cache["yo"].reshape(-1, d).T @ dv_o2.reshape(-1, c.latent_dim)
        g["head_vis_b"] += dv_o2.reshape(-1, c.latent_dim).sum(axis=0)
        g["ln_vis_g"] += (dyo * cache["yo_n"]).reshape(-1, d).sum(axis=0)
        g["ln_vis_b"] += dyo.reshape(-1, d).sum(axis=0)
        dyo_n = dyo * p["ln_vis_g"]

        dya = dv_a @ p["head_act_w"].T
        g["head_act_w"] += cache["ya"].reshape(-1, d).T @ dv_a.reshape(-1, c.action_dim)
        g["head_act_b"] += dv_a.reshape(-1, c.action_dim).sum(axis=0)
        g["ln_act_g"] += (dya * cache["ya_n"]).reshape(-1, d).sum(axis=0)
        g["ln_act_b"] += dya.reshape(-1, d).sum(axis=0)
        dya_n = dya * p["ln_act_g"]

        dx = np.zeros_like(cache["x_final"])
        dx[:, self.sl_ac] = _layernorm_back(dya_n, cache["ya_n"], cache["inv_a"])
        dx[:, self.sl_vi] = _layernorm_back(dyo_n, cache["yo_n"], cache["inv_o"])

        d_instr = np.zeros_like(cache["instr"])

        for li in reversed(range(c.n_layers)):
            lc = cache["layers"][li]
            mods = lc["mods"]
            dmods = {key: [None] * 6 for key in mods}

            # FFN sublayer
            dff = np.empty_like(lc["ff"])
            for sl, ex, ct in groups:
                gate = mods[(ex, ct)][5]
                dmods[(ex, ct)][5] = (dx[:, sl] * lc["ff"][:, sl]).sum(axis=1)
                dff[:, sl] = dx[:, sl] * gate[:, None]
            dg1 = np.empty_like(lc["g1"])
            dg1[:, self.sl_act_expert] = lin_back(
                dff[:, self.sl_act_expert], lc["g1"][:, self.sl_act_expert],
                f"L{li}_a_ffn2_w", f"L{li}_a_ffn2_b", g,
            )
            for sl in (self.sl_hv, self.sl_vi):
                dg1[:, sl] = lin_back(dff[:, sl], lc["g1"][:, sl],
                                      f"L{li}_v_ffn2_w", f"L{li}_v_ffn2_b", g)
            dh1 = _gelu_back(dg1, lc["h1"], lc["tanh1"])
            dxm2 = np.empty_like(lc["xm2"])
            dxm2[:, self.sl_act_expert] = lin_back(
                dh1[:, self.sl_act_expert], lc["xm2"][:, self.sl_act_expert],
                f"L{li}_a_ffn1_w", f"L{li}_a_ffn1_b", g,
            )
            for sl in (self.sl_hv, self.sl_vi):
                dxm2[:, sl] = lin_back(dh1[:, sl], lc["xm2"][:, sl],
                                       f"L{li}_v_ffn1_w", f"L{li}_v_ffn1_b", g)
            dln2 = np.empty_like(dxm2)
            for sl, ex, ct in groups:
                sc = mods[(ex, ct)][4]
                dmods[(ex, ct)][4] = (dxm2[:, sl] * lc["ln2"][:, sl]).sum(axis=1)
                dmods[(ex, ct)][3] = dxm2[:, sl].sum(axis=1)
                dln2[:, sl] = dxm2[:, sl] * (1.0 + sc[:, None])
            dx = dx + _layernorm_back(dln2, lc["ln2"], lc["inv2"])

            # cross-attention sublayer
            dmx_out = dx  # residual: d(x_out) flows into both branches
            dmx = lin_back(dmx_out, lc["mx"], f"L{li}_x_out_w", f"L{li}_x_out_b", g)
            dmx_h = self._split_heads(dmx)
            dax = dmx_h @ lc["vx"].transpose(0, 1, 3, 2)
            dvx = lc["ax"].transpose(0, 1, 3, 2) @ dmx_h
            dsx = _softmax_back(dax, lc["ax"]) * scale
            dqx = dsx @ lc["kx"]
            dkx = dsx.transpose(0, 1, 3, 2) @ lc["qx"]
            dxc = lin_back(self._merge_heads(dqx), lc["xc"], f"L{li}_x_q_w", f"L{li}_x_q_b", g)
            d_instr += lin_back(self._merge_heads(dkx), cache["instr"],
                                f"L{li}_x_k_w", f"L{li}_x_k_b", g)
            d_instr += lin_back(self._merge_heads(dvx), cache["instr"],
                                f"L{li}_x_v_w", f"L{li}_x_v_b", g)
            g[f"L{li}_x_ln_g"] += (dxc * lc["xcn"]).reshape(-1, d).sum(axis=0)
            g[f"L{li}_x_ln_b"] += dxc.reshape(-1, d).sum(axis=0)
            dxcn = dxc * p[f"L{li}_x_ln_g"]
            dx = dx + _layernorm_back(dxcn, lc["xcn"], lc["invx"])

            # self-attention sublayer
            d_attn_out = np.empty_like(lc["attn_out"])
            for sl, ex, ct in groups:
                gate = mods[(ex, ct)][2]
                dmods[(ex, ct)][2] = (dx[:, sl] * lc["attn_out"][:, sl]).sum(axis=1)
                d_attn_out[:, sl] = dx[:, sl] * gate[:, None]
            dmerged = np.empty_like(lc["merged"])
            dmerged[:, self.sl_act_expert] = lin_back(
                d_attn_out[:, self.sl_act_expert], lc["merged"][:, self.sl_act_expert],
                f"L{li}_a_out_w", f"L{li}_a_out_b", g,
            )
            for sl in (self.sl_hv, self.sl_vi):
                dmerged[:, sl] = lin_back(d_attn_out[:, sl], lc["merged"][:, sl],
                                          f"L{li}_v_out_w", f"L{li}_v_out_b", g)
            dO = self._split_heads(dmerged)
            da = dO @ lc["v"].transpose(0, 1, 3, 2)
            dv = lc["a"].transpose(0, 1, 3, 2) @ dO
            ds = _softmax_back(da, lc["a"]) * scale
            dq = ds @ lc["k"]
            dk = ds.transpose(0, 1, 3, 2) @ lc["q"]
            dqkv = np.concatenate(
                [self._merge_heads(dq), self._merge_heads(dk), self._merge_heads(dv)],
                axis=-1,
            )
            dxm = np.empty_like(lc["xm"])
            dxm[:, self.sl_act_expert] = lin_back(
                dqkv[:, self.sl_act_expert], lc["xm"][:, self.sl_act_expert],
                f"L{li}_a_qkv_w", f"L{li}_a_qkv_b", g,
            )
            for sl in (self.sl_hv, self.sl_vi):
                dxm[:, sl] = lin_back(dqkv[:, sl], lc["xm"][:, sl],
                                      f"L{li}_v_qkv_w", f"L{li}_v_qkv_b", g)
            dln1 = np.empty_like(dxm)
            for sl, ex, ct in groups:
                sc = mods[(ex, ct)][1]
                dmods[(ex, ct)][1] = (dxm[:, sl] * lc["ln1"][:, sl]).sum(axis=1)
                dmods[(ex, ct)][0] = dxm[:, sl].sum(axis=1)
                dln1[:, sl] = dxm[:, sl] * (1.0 + sc[:, None])
            dx = dx + _layernorm_back(dln1, lc["ln1"], lc["inv1"])

            # modulation projections -> conditioning vectors
            for (ex, ct), parts in dmods.items():
                dm = np.concatenate(parts, axis=-1)
                cvec = cache[f"c_{ct}"]
                g[f"L{li}_{ex}_mod_w"] += cvec.T @ dm
                g[f"L{li}_{ex}_mod_b"] += dm.sum(axis=0)
                dc[ct] = dc[ct] + dm @ p[f"L{li}_{ex}_mod_w"].T

        # token assembly backward
        tok = cache["tok"]
        hp = c.history_len * c.patch_count
        d_hv = dx[:, self.sl_hv].reshape(B, c.history_len, c.patch_count, d)
        g["pos_patch"] += d_hv.sum(axis=(0, 1))
        g["pos_hist_frame"] += d_hv.sum(axis=(0, 2))
        d_hist_latents = d_hv @ p["vis_in_w"].T
        g["vis_in_w"] += (
            cache["batch"].hist_latents.astype(d_hv.dtype).reshape(-1, c.latent_dim).T
            @ d_hv.reshape(-1, d)
        )
        g["vis_in_b"] += d_hv.reshape(-1, d).sum(axis=0)

        d_ha = dx[:, self.sl_ha]
        g["pos_hist_act"] += d_ha.sum(axis=0)
        hpres = tok["hpres"]
        d_hist_actions = np.zeros_like(cache["batch"].hist_actions, dtype=d_ha.dtype)
        if hpres.any():
            sel = d_ha[hpres]
            d_hist_actions[hpres] = sel @ p["act_in_w"].T
            g["act_in_w"] += (
                cache["batch"].hist_actions[hpres].astype(sel.dtype)
                .reshape(-1, c.action_dim).T @ sel.reshape(-1, d)
            )
            g["act_in_b"] += sel.reshape(-1, d).sum(axis=0)
        if (~hpres).any():
            g["reg_action"] += d_ha[~hpres].sum(axis=(0, 1))

        d_ac = dx[:, self.sl_ac]
        g["pos_action"] += d_ac.sum(axis=0)
        apres = tok["apres"]
        d_actions = np.zeros_like(cache["batch"].actions, dtype=d_ac.dtype)
        if apres.any():
            sel = d_ac[apres]
            d_actions[apres] = sel @ p["act_in_w"].T
            g["act_in_w"] += (
                cache["batch"].actions[apres].astype(sel.dtype)
                .reshape(-1, c.action_dim).T @ sel.reshape(-1, d)
            )
            g["act_in_b"] += sel.reshape(-1, d).sum(axis=0)
        if (~apres).any():
            g["reg_action"] += d_ac[~apres].sum(axis=(0, 1))

        F = c.n_future_frames
        d_vi = dx[:, self.sl_vi].reshape(B, F, c.patch_count, d)
        g["pos_patch"] += d_vi.sum(axis=(0, 1))
        vpres = tok["vpres"]
        d_latents = np.zeros_like(cache["batch"].latents, dtype=d_vi.dtype)
        if vpres.any():
            sel = d_vi[vpres]
            d_latents[vpres] = sel @ p["vis_in_w"].T
            g["vis_in_w"] += (
                cache["batch"].latents[vpres].astype(sel.dtype)
                .reshape(-1, c.latent_dim).T @ sel.reshape(-1, d)
            )
            g["vis_in_b"] += sel.reshape(-1, d).sum(axis=0)
        if (~vpres).any():
            g["reg_vision"] += d_vi[~vpres].sum(axis=(0, 1, 2))

        # instruction embeddings
        g["instr_pos"] += d_instr.sum(axis=0)
        np.add.at(g["instr_embed"], cache["batch"].instr_ids, d_instr)

        # conditioning terms: c_h = (c_a + c_o) / 2; task embedding is shared
        dca = dc["a"] + 0.5 * dc["h"]
        dco = dc["o"] + 0.5 * dc["h"]
        if isinstance(dca, np.ndarray):
            np.add.at(g["task_embed"], cache["batch"].modes.astype(int), dca)
        if isinstance(dco, np.ndarray):
            np.add.at(g["task_embed"], cache["batch"].modes.astype(int), dco)

        input_grads = {
            "actions": d_actions,
            "latents": d_latents,
            "hist_latents": d_hist_latents,
            "hist_actions": d_hist_actions,
        }
        return g, input_grads

    # -- misc -----------------------------------------------------------------------

    def attention_maps(self, batch: TokenBatch, layer: int) -> np.ndarray:
        """Post-softmax self-attention (B, H, T, T) of one layer."""
        if not 0 <= layer < self.config.n_layers:
            raise ValueError(f"layer must be in [0, {self.config.n_layers}), got {layer}")
        _, _, _, maps = self.forward(batch, need_cache=False, collect_attention=layer)
        return maps

    def _check_shapes(self, batch: TokenBatch):
        c = self.config
        B = batch.batch_size
        want = {
            "hist_latents": (B, c.history_len, c.patch_count, c.latent_dim),
            "hist_actions": (B, c.history_len, c.action_dim),
            "actions": (B, c.chunk_len, c.action_dim),
            "latents": (B, c.n_future_frames, c.patch_count, c.latent_dim),
            "instr_ids": (B, c.instr_len),
        }
        for name, shape in want.items():
            got = getattr(batch, name).shape
            if got != shape:
                raise ValueError(f"{name} must have shape {shape}, got {got}")


# --- initialization ---------------------------------------------------------------

def init_params(config: ModelConfig, dtype=np.float32) -> dict:
    """Learned parameters. AdaLN modulations, cross-attention outputs and
    both velocity heads start at zero, so a fresh model outputs exactly 0."""
    c = config
    rng = philox(np.uint64(c.param_seed), np.uint64(STREAM_INIT))
    d, hdim = c.d_model, c.ffn_mult * c.d_model

    def normal(*shape, std=0.02):
        return rng.normal(0.0, std, size=shape).astype(dtype)

    def xavier(n_in, n_out):
        std = np.sqrt(2.0 / (n_in + n_out))
        return rng.normal(0.0, std, size=(n_in, n_out)).astype(dtype)

    def zeros(*shape):
        return np.zeros(shape, dtype=dtype)

    p = {
        "instr_embed": normal(len(VOCAB), d),
        "instr_pos": normal(INSTR_LEN, d),
        "task_embed": normal(N_TASK_MODES, d),
        "act_in_w": xavier(c.action_dim, d), "act_in_b": zeros(d),
        "vis_in_w": xavier(c.latent_dim, d), "vis_in_b": zeros(d),
        "reg_action": normal(d), "reg_vision": normal(d),
        "pos_action": normal(c.chunk_len, d),
        "pos_patch": normal(c.patch_count, d),
        "pos_hist_frame": normal(c.history_len, d),
        "pos_hist_act": normal(c.history_len, d),
        "ln_act_g": np.ones(d, dtype=dtype), "ln_act_b": zeros(d),
        "ln_vis_g": np.ones(d, dtype=dtype), "ln_vis_b": zeros(d),
        "head_act_w": zeros(d, c.action_dim), "head_act_b": zeros(c.action_dim),
        "head_vis_w": zeros(d, c.latent_dim), "head_vis_b": zeros(c.latent_dim),
    }
    for li in range(c.n_layers):
        for ex in ("a", "v"):
            p[f"L{li}_{ex}_mod_w"] = zeros(d, 6 * d)
            p[f"L{li}_{ex}_mod_b"] = zeros(6 * d)
            p[f"L{li}_{ex}_qkv_w"] = xavier(d, 3 * d)
            p[f"L{li}_{ex}_qkv_b"] = zeros(3 * d)
            p[f"L{li}_{ex}_out_w"] = xavier(d, d)
            p[f"L{li}_{ex}_out_b"] = zeros(d)
            p[f"L{li}_{ex}_ffn1_w"] = xavier(d, hdim)
            p[f"L{li}_{ex}_ffn1_b"] = zeros(hdim)
            p[f"L{li}_{ex}_ffn2_w"] = xavier(hdim, d)
            p[f"L{li}_{ex}_ffn2_b"] = zeros(d)
        p[f"L{li}_x_ln_g"] = np.ones(d, dtype=dtype)
        p[f"L{li}_x_ln_b"] = zeros(d)
        p[f"L{li}_x_q_w"] = xavier(d, d)
        p[f"L{li}_x_q_b"] = zeros(d)
        p[f"L{li}_x_k_w"] = xavier(d, d)
        p[f"L{li}_x_k_b"] = zeros(d)
        p[f"L{li}_x_v_w"] = xavier(d, d)
        p[f"L{li}_x_v_b"] = zeros(d)
        p[f"L{li}_x_out_w"] = zeros(d, d)
        p[f"L{li}_x_out_b"] = zeros(d)
    return p


def count_params(config: ModelConfig) -> int:
    """Exact learned-parameter count.

    Closed form: embeddings/positions/registers/heads contribute
    (V + L + 4 + A + D + 2 + K + P + 2*hist + 2) * d + (A + D) * (d + 1)
    + 2 * 2 * d (final LN affines) + A + D adjustments, and each layer adds
    two expert stacks (mod: d*6d + 6d, qkv: d*3d + 3d, out: d*d + d,
    ffn: d*m*d * 2 + m*d + d) plus the shared cross-attention block
    (ln: 2d, three d*d + d projections and one zero-initialized d*d + d).
    The implementation sums the actual parameter arrays; the formula above
    documents the growth law (quadratic in d at fixed depth).
    """
    return sum(arr.size for arr in init_params(config, dtype=np.float32).values())


# --- checkpoints --------------------------------------------------------------------

def save_checkpoint(path: str, model: MMDiT, extra: Optional[dict] = None,
                    rng_state: Optional[dict] = None):
    """Single-file container: magic, JSON header (config, parameter table,
    encoder fingerprint, rng state, version), then the LE float32 blob."""
    names = sorted(model.params)
    table = []
    blob = io.BytesIO()
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        table.append({"name": name, "offset": offset, "shape": list(arr.shape)})
        blob.write(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_json(),
        "params": table,
        "blob_bytes": offset,
        "encoder_fingerprint": model.config.encoder.fingerprint(),
        "rng_state": rng_state or {},
        "extra": extra or {},
    }
    hb = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(blob.getvalue())


def load_checkpoint(path: str, expect_config: Optional[ModelConfig] = None):
    """Returns (model, header). Raises CorruptionError on truncation,
    MigrationError on version mismatch, CompatibilityError on config or
    encoder fingerprint mismatch."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptionError(f"{path!r} is not a checkpoint file")
    hlen = struct.unpack("<I", raw[8:12])[0]
    if len(raw) < 12 + hlen:
        raise CorruptionError(f"{path!r}: truncated header")
    header = json.loads(raw[12 : 12 + hlen].decode())
    if header["version"] != CHECKPOINT_VERSION:
        raise MigrationError(f"checkpoint version {header['version']} unsupported")
    blob = raw[12 + hlen :]
    if len(blob) != header["blob_bytes"]:
        raise CorruptionError(
            f"{path!r}: blob is {len(blob)} bytes, header says {header['blob_bytes']}"
        )
    config = ModelConfig.from_json(header["config"])
    if expect_config is not None:
        if config.to_json() != expect_config.to_json():
            for key, val in expect_config.to_json().items():
                if header["config"].get(key) != val and key != "encoder":
                    raise CompatibilityError(
                        f"checkpoint config mismatch at {key!r}: "
                        f"{header['config'].get(key)} != {val}"
                    )
            raise CompatibilityError("checkpoint encoder spec mismatch")
        if expect_config.encoder.fingerprint() != header["encoder_fingerprint"]:
            raise CompatibilityError("encoder fingerprint mismatch")
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).copy()
    model = MMDiT(config, params=params)
    return model, header
