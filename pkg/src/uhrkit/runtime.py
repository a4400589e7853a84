"""Deterministic weights, graph execution, persistence, and gradient checks.

Weight initialization draws from a counter-based 64-bit xorshift-multiply
generator (splitmix-style), so a ``(graph, seed)`` pair maps to bit-identical
parameters on every platform — no global RNG state is involved.  The
executor walks a shaped :class:`~uhrkit.graph.LayerGraph` in topological
order over plain numpy arrays, reusing the primitive implementations from
:mod:`uhrkit.ops`, and the reverse sweep mirrors it with the matching VJPs.

Gradient verification compares the reverse-mode gradients against central
differences ``(f(t+eps) - f(t-eps)) / (2 eps)`` of the scalar verification
loss (the mean of the output map), in float64.  Three details make this
fast and sound:

* only the nodes downstream of the perturbed parameter are re-executed,
  against cached baseline activations, and all sampled coordinates of one
  parameter ride along the batch axis of a single replay (every primitive
  is independent per batch element);
* loss differences are taken by subtracting the perturbed outputs
  elementwise before reducing, which sidesteps the cancellation that a
  difference of two separately rounded means would suffer;
* the network is piecewise linear in each parameter (a weight appears at
  most once on any path), so a coordinate whose ±eps interval straddles a
  ReLU kink measures the average slope of two linear pieces instead of the
  derivative.  Each replay therefore bounds the kink-induced loss error —
  every unit whose sign differs from the baseline contributes at most its
  overshoot ``|z|`` times the baseline loss sensitivity at that unit — and
  a coordinate is skipped and resampled when the bound could corrupt the
  comparison at the tested tolerance.  Away from kinks the central
  difference is exact up to rounding.  Sampled, compared, and skipped
  counts are reported per parameter.
"""

from __future__ import annotations

import os
import struct
import time
import zlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import ops
from .graph import LayerGraph, Node, infer_shapes
from .ops import ChecksumMismatch, FormatError, ShapeMismatch, Tensor

BN_EPS = 1e-5
WEIGHTS_MAGIC = b"HRWS"
WEIGHTS_VERSION = 1
_U64 = np.uint64
_GOLDEN = 0x9E3779B97F4A7C15


class WeightMissing(KeyError):
    pass


class NonFiniteGradient(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# seeded initialization


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer over uint64 arrays."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
        return z ^ (z >> _U64(31))


def _fnv1a64(name: str) -> int:
    h = 0xCBF29CE484222325
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _normals(seed: int, name: str, count: int) -> np.ndarray:
    """Standard normals from counter-mode uniforms via Box-Muller."""
    base = _U64((seed ^ _fnv1a64(name)) & 0xFFFFFFFFFFFFFFFF)
    pairs = (count + 1) // 2
    with np.errstate(over="ignore"):
        ctr = base + _U64(_GOLDEN) * np.arange(1, 2 * pairs + 1, dtype=np.uint64)
    z = _mix64(ctr)
    u = ((z >> _U64(11)).astype(np.float64) + 1.0) * 2.0**-53  # (0, 1]
    u1, u2 = u[:pairs], u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    out = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
    return out[:count]


@dataclass
class WeightStore:
    """Ordered map from parameter names to arrays, plus its provenance.

    Iteration order follows the graph's topological order: the conv weight
    of node *n* is ``n.w``; a batchnorm contributes ``n.gamma``, ``n.beta``,
    ``n.mean`` and ``n.var``.
    """

    seed: int
    arrays: "OrderedDict[str, np.ndarray]"
    init_scheme: str = "he-normal-fan-out/splitmix64"

    def astype(self, dtype) -> "WeightStore":
        return WeightStore(
            self.seed,
            OrderedDict((k, v.astype(dtype, copy=False)) for k, v in self.arrays.items()),
            self.init_scheme,
        )

    def allclose(self, other: "WeightStore") -> bool:
        return (
            self.seed == other.seed
            and list(self.arrays) == list(other.arrays)
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


def param_entries(graph: LayerGraph) -> list[tuple[str, str, str, tuple[int, ...]]]:
    """(name, node_id, kind, shape) for every parameter, in graph order."""
    out = []
    for node in graph.nodes:
        if node.kind == "conv":
            a = node.attrs
            out.append((f"{node.id}.w", node.id, "conv.w", (a["out_ch"], a["in_ch"], a["k"], a["k"])))
        elif node.kind == "bn":
            c = node.attrs["ch"]
            for p in ("gamma", "beta", "mean", "var"):
                out.append((f"{node.id}.{p}", node.id, f"bn.{p}", (c,)))
    return out


def init_weights(graph: LayerGraph, seed: int = 0) -> WeightStore:
    """He-style fan-out-scaled normal conv weights; identity batchnorms.

    Conv std is ``sqrt(2 / (k*k*out_ch))``; batchnorm starts as the identity
    transform (gamma 1, beta 0, running mean 0, running var 1).
    """
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, _node_id, kind, shape in param_entries(graph):
        if kind == "conv.w":
            out_ch, _in_ch, k, _ = shape
            std = np.sqrt(2.0 / (k * k * out_ch))
            count = int(np.prod(shape))
            arrays[name] = (_normals(seed, name, count) * std).astype(np.float32).reshape(shape)
        elif kind in ("bn.gamma", "bn.var"):
            arrays[name] = np.ones(shape, dtype=np.float32)
        else:
            arrays[name] = np.zeros(shape, dtype=np.float32)
    return WeightStore(seed=seed, arrays=arrays)


# ---------------------------------------------------------------------------
# weight persistence: magic "HRWS", u32 version, u64 seed, u32 entry count,
# entries {u16 name_len, name, u8 dtype, u8 rank, u64 dims[], payload LE},
# trailing u32 CRC32 over the entries region

_DT_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DT_FROM = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_weights(store: WeightStore, path) -> None:
    body = bytearray()
    for name, arr in store.arrays.items():
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb))
        body += nb
        body += struct.pack("<BB", _DT_CODE[arr.dtype], arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<IQI", WEIGHTS_VERSION, store.seed, len(store.arrays)))
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(bytes(body))))


def load_weights(path) -> WeightStore:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20:
        raise FormatError("file too short for a weight-store header", len(raw))
    if raw[:4] != WEIGHTS_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}", 0)
    version, seed, count = struct.unpack_from("<IQI", raw, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    body = raw[20:-4]
    (crc_stored,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(body) != crc_stored:
        raise ChecksumMismatch("weight payload does not match its checksum")
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    off = 0
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off : off + name_len].decode("utf-8")
            off += name_len
            dt_code, rank = struct.unpack_from("<BB", body, off)
            off += 2
            dims = struct.unpack_from(f"<{rank}Q", body, off)
            off += 8 * rank
            dtype = _DT_FROM[dt_code]
            n_items = int(np.prod(dims)) if dims else 1
            arr = np.frombuffer(body, dtype=dtype, count=n_items, offset=off)
            off += n_items * dtype.itemsize
        except (struct.error, KeyError, ValueError) as exc:
            raise FormatError(f"truncated or corrupt entry: {exc}", 20 + off) from exc
        arrays[name] = arr.reshape(dims).astype(dtype.newbyteorder("="))
    if off != len(body):
        raise FormatError("trailing bytes after the last entry", 20 + off)
    return WeightStore(seed=seed, arrays=arrays)


# ---------------------------------------------------------------------------
# execution


class _Exec:
    """Per-run caches: dtype-cast parameters, pre-reshaped conv weights and
    pre-folded batchnorm affines."""

    def __init__(self, graph: LayerGraph, store: WeightStore, dtype):
        self.graph = graph
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        for name, _nid, _kind, shape in param_entries(graph):
            if name not in store.arrays:
                raise WeightMissing(name)
            arr = store.arrays[name]
            if arr.shape != shape:
                raise ShapeMismatch(f"weight {name} has shape {arr.shape}, node expects {shape}")
            self.params[name] = arr.astype(self.dtype, copy=False)
        self._bn_aff: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        # conv -> its batchnorm when that is the conv's sole consumer; the
        # replay path fuses the pair to halve elementwise traffic
        consumers: dict[str, list[Node]] = {}
        for node in graph.nodes:
            for src in node.inputs:
                consumers.setdefault(src, []).append(node)
        self.conv_bn: dict[str, Node] = {}
        for node in graph.nodes:
            if node.kind == "conv":
                cons = consumers.get(node.id, [])
                if len(cons) == 1 and cons[0].kind == "bn":
                    self.conv_bn[node.id] = cons[0]

    def bn_aff(self, nid: str) -> tuple[np.ndarray, np.ndarray]:
        ac = self._bn_aff.get(nid)
        if ac is None:
            g = self.params[f"{nid}.gamma"]
            beta = self.params[f"{nid}.beta"]
            m = self.params[f"{nid}.mean"]
            v = self.params[f"{nid}.var"]
            scale = g / np.sqrt(v + BN_EPS)
            a = scale.reshape(1, -1, 1, 1)
            c = (beta - m * scale).reshape(1, -1, 1, 1)
            ac = (a, c)
            self._bn_aff[nid] = ac
        return ac

    def eval_node(self, node: Node, ins: list[np.ndarray]) -> np.ndarray:
        kind = node.kind
        if kind == "conv":
            a = node.attrs
            return ops.conv2d_fwd(ins[0], self.params[f"{node.id}.w"], a["stride"], a["pad"])
        if kind == "bn":
            a, c = self.bn_aff(node.id)
            y = ins[0] * a
            y += c
            return y
        if kind == "relu":
            return np.maximum(ins[0], 0)
        if kind == "upsample":
            return ops.bilinear_up2_fwd(ins[0])
        if kind == "chpool":
            return ops.channel_pool2_fwd(ins[0], node.attrs.get("mode", "avg"))
        if kind == "concat":
            return ops.concat_fwd(ins)
        if kind == "add":
            return ops.add_fwd(ins[0], ins[1])
        raise ValueError(f"cannot execute node kind {kind!r}")


def run_forward(
    graph: LayerGraph,
    store: WeightStore,
    x: np.ndarray,
    keep_activations: bool = False,
    check_shapes: bool = True,
    check_finite: bool = False,
) -> tuple[np.ndarray, dict[str, np.ndarray] | None]:
    """Execute the graph in topological order.

    With ``keep_activations`` every node's output is retained (needed for
    the reverse sweep); otherwise buffers are freed as soon as their last
    consumer has run.
    """
    ex = _Exec(graph, store, x.dtype)
    remaining: dict[str, int] = {}
    for node in graph.nodes:
        for src in node.inputs:
            remaining[src] = remaining.get(src, 0) + 1
    acts: dict[str, np.ndarray] = {graph.input_id: x}
    if check_shapes and graph.nodes[0].out_shape is not None:
        if tuple(x.shape) != tuple(graph.nodes[0].out_shape):
            raise ShapeMismatch(
                f"input shape {x.shape} does not match the graph's {graph.nodes[0].out_shape}"
            )
    for node in graph.nodes[1:]:
        ins = [acts[i] for i in node.inputs]
        y = ex.eval_node(node, ins)
        if check_shapes and node.out_shape is not None and tuple(y.shape) != tuple(node.out_shape):
            raise ShapeMismatch(f"node {node.id!r} produced {y.shape}, expected {node.out_shape}")
        if check_finite and not np.isfinite(y).all():
            raise FloatingPointError(f"non-finite values after node {node.id!r}")
        acts[node.id] = y
        if not keep_activations:
            for src in node.inputs:
                remaining[src] -= 1
                if remaining[src] == 0 and src != graph.output_id and src != graph.input_id:
                    del acts[src]
    out = acts[graph.output_id]
    return out, (acts if keep_activations else None)


def forward(graph: LayerGraph, store: WeightStore, x: Tensor | np.ndarray) -> Tensor:
    """Shape-checked forward pass; infers shapes on the fly when needed."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not graph.shaped:
        graph = infer_shapes(graph, tuple(arr.shape))
    out, _ = run_forward(graph, store, arr)
    return Tensor(out)


def run_backward(
    graph: LayerGraph,
    store: WeightStore,
    acts: dict[str, np.ndarray],
    out_grad: np.ndarray,
    collect: set[str] | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray, dict[str, np.ndarray]]:
    """Reverse sweep over the whole graph.

    Returns per-parameter gradients (keyed like the weight store), the
    gradient w.r.t. the graph input, and the output gradients of the nodes
    named in ``collect`` (the gradient checker uses these as sensitivities).
    """
    dtype = out_grad.dtype
    params = {name: store.arrays[name].astype(dtype, copy=False) for name in store.arrays}
    grads: dict[str, np.ndarray] = {graph.output_id: out_grad}
    pgrads: dict[str, np.ndarray] = {}
    collected: dict[str, np.ndarray] = {}

    def send(nid: str, g: np.ndarray) -> None:
        if nid in grads:
            grads[nid] = grads[nid] + g
        else:
            grads[nid] = g

    for node in reversed(graph.nodes):
        g = grads.pop(node.id, None)
        if g is None or node.kind == "input":
            continue
        if collect and node.id in collect:
            collected[node.id] = g
        ins = [acts[i] for i in node.inputs]
        if node.kind == "conv":
            a = node.attrs
            w = params[f"{node.id}.w"]
            dx, dw = ops.conv2d_vjp(ins[0], w, a["stride"], a["pad"], g)
            send(node.inputs[0], dx)
            pgrads[f"{node.id}.w"] = pgrads.get(f"{node.id}.w", 0) + dw
        elif node.kind == "bn":
            p = node.id
            dx, dg, db, dm, dv = ops.batchnorm_vjp(
                ins[0],
                params[f"{p}.gamma"],
                params[f"{p}.beta"],
                params[f"{p}.mean"],
                params[f"{p}.var"],
                BN_EPS,
                g,
            )
            send(node.inputs[0], dx)
            for suffix, d in (("gamma", dg), ("beta", db), ("mean", dm), ("var", dv)):
                key = f"{p}.{suffix}"
                pgrads[key] = pgrads.get(key, 0) + d
        elif node.kind == "relu":
            send(node.inputs[0], ops.relu_vjp(ins[0], g))
        elif node.kind == "upsample":
            send(node.inputs[0], ops.bilinear_up2_vjp(ins[0], g))
        elif node.kind == "chpool":
            send(node.inputs[0], ops.channel_pool2_vjp(ins[0], g, node.attrs.get("mode", "avg")))
        elif node.kind == "concat":
            for src, dg_ in zip(node.inputs, ops.concat_vjp(ins, g)):
                send(src, dg_)
        elif node.kind == "add":
            send(node.inputs[0], g)
            send(node.inputs[1], g)
    input_grad = grads.get(graph.input_id)
    if input_grad is None:
        input_grad = np.zeros_like(acts[graph.input_id])
    return pgrads, input_grad, collected


# ---------------------------------------------------------------------------
# gradient verification


@dataclass(frozen=True)
class ParamCheck:
    name: str
    size: int
    sampled: int
    checked: int
    skipped_kinks: int
    max_rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    eps: float
    tolerance: float
    dtype: str
    sample_count: int
    seed: int
    params: tuple[ParamCheck, ...]
    elapsed_seconds: float

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    @property
    def passed(self) -> bool:
        return all(p.max_rel_err < self.tolerance for p in self.params)

    @property
    def total_sampled(self) -> int:
        return sum(p.sampled for p in self.params)

    @property
    def total_checked(self) -> int:
        return sum(p.checked for p in self.params)

    @property
    def total_skipped(self) -> int:
        return sum(p.skipped_kinks for p in self.params)

    @property
    def fully_sampled(self) -> bool:
        """Every parameter had at least min(sample_count, size) coordinates
        drawn (kink-straddling intervals among them are reported, not
        silently dropped)."""
        return all(p.sampled >= min(self.sample_count, p.size) for p in self.params)

    def to_json_dict(self) -> dict:
        return {
            "eps": self.eps,
            "tolerance": self.tolerance,
            "dtype": self.dtype,
            "sample_count": self.sample_count,
            "seed": self.seed,
            "passed": self.passed,
            "max_rel_err": self.max_rel_err,
            "sampled": self.total_sampled,
            "checked": self.total_checked,
            "skipped_kinks": self.total_skipped,
            "fully_sampled": self.fully_sampled,
            "elapsed_seconds": round(self.elapsed_seconds, 3),
            "params": [
                {
                    "name": p.name,
                    "sampled": p.sampled,
                    "checked": p.checked,
                    "skipped_kinks": p.skipped_kinks,
                    "max_rel_err": p.max_rel_err,
                }
                for p in self.params
            ],
        }

    def to_text(self, top: int = 10) -> str:
        worst = sorted(self.params, key=lambda p: -p.max_rel_err)[:top]
        lines = [
            f"gradcheck: {self.total_sampled} coordinates sampled over {len(self.params)} "
            f"parameter tensors, {self.total_checked} compared "
            f"({self.total_skipped} intervals straddled a ReLU kink), eps={self.eps:g}, "
            f"{self.dtype}, {self.elapsed_seconds:.1f}s",
            f"max relative error {self.max_rel_err:.3e} vs tolerance {self.tolerance:g} -> "
            + ("PASS" if self.passed else "FAIL"),
            "worst parameters:",
        ]
        for p in worst:
            lines.append(f"  {p.max_rel_err:.3e}  {p.name}")
        return "\n".join(lines)


def _descendants(graph: LayerGraph, owner: str) -> list[Node]:
    reach = {owner}
    nodes = []
    for node in graph.nodes:
        if node.id == owner:
            continue
        if any(i in reach for i in node.inputs):
            reach.add(node.id)
            nodes.append(node)
    return nodes


def _stacked_patch(
    kind: str,
    node: Node,
    coords: np.ndarray,
    eps: float,
    base_out: np.ndarray,
    x_in: np.ndarray,
    params: dict[str, np.ndarray],
    win: np.ndarray | None,
) -> np.ndarray:
    """Owner-node outputs under ±eps single-coordinate nudges, stacked as a
    batch ``[+eps lanes..., -eps lanes...]``.

    The owner is affine in each of its parameters (batchnorm variance is
    recomputed outright), so no re-convolution is needed: a conv weight
    coordinate contributes ``eps`` times one input-window column to one
    output channel.
    """
    k = len(coords)
    lanes = np.repeat(base_out, 2 * k, axis=0)
    if kind == "conv.w":
        for i, idx in enumerate(coords):
            o, ci, ki, kj = np.unravel_index(int(idx), params[f"{node.id}.w"].shape)
            col = win[0, ci, :, :, ki, kj]
            lanes[i, o] += eps * col
            lanes[k + i, o] -= eps * col
        return lanes
    g = params[f"{node.id}.gamma"]
    beta = params[f"{node.id}.beta"]
    m = params[f"{node.id}.mean"]
    v = params[f"{node.id}.var"]
    for i, idx in enumerate(coords):
        c = int(idx)
        if kind == "bn.gamma":
            unit = (x_in[0, c] - m[c]) / np.sqrt(v[c] + BN_EPS)
            lanes[i, c] += eps * unit
            lanes[k + i, c] -= eps * unit
        elif kind == "bn.beta":
            lanes[i, c] += eps
            lanes[k + i, c] -= eps
        elif kind == "bn.mean":
            slope = g[c] / np.sqrt(v[c] + BN_EPS)
            lanes[i, c] -= eps * slope
            lanes[k + i, c] += eps * slope
        else:  # bn.var, exact recompute of the nudged channel
            lanes[i, c] = g[c] * (x_in[0, c] - m[c]) / np.sqrt(v[c] + eps + BN_EPS) + beta[c]
            lanes[k + i, c] = g[c] * (x_in[0, c] - m[c]) / np.sqrt(v[c] - eps + BN_EPS) + beta[c]
    return lanes


def _batched_replay(
    ex: _Exec,
    sub: list[Node],
    base: dict[str, np.ndarray],
    owner_id: str,
    lanes: np.ndarray,
    output_id: str,
    kink_ctx: dict[str, tuple[np.ndarray, np.ndarray]],
) -> tuple[np.ndarray, np.ndarray]:
    """Re-execute the owner's descendants with perturbations stacked along
    the batch axis, reading untouched inputs from the baseline cache.

    Returns the batched graph output together with a per-lane bound on the
    loss error a finite difference suffers from ReLU state flips: for every
    unit whose sign differs from the baseline, the deviation of ``relu``
    from its baseline linearization is at most ``|z|``, weighted by the
    baseline sensitivity of the loss to that unit (from ``kink_ctx``).
    Buffers are freed as their last in-subgraph consumer runs.
    """
    b = lanes.shape[0]
    remaining: dict[str, int] = {}
    for node in sub:
        for src in node.inputs:
            remaining[src] = remaining.get(src, 0) + 1
    local: dict[str, np.ndarray] = {owner_id: lanes}
    kink_err = np.zeros(b)
    fused: set[str] = set()
    out = None
    for node in sub:
        if node.id in fused:
            continue
        ins = []
        for src in node.inputs:
            a = local.get(src)
            if a is None:
                a = base[src]
                if node.kind in ("concat", "add") and a.shape[0] != b:
                    a = np.broadcast_to(a, (b,) + a.shape[1:])
            ins.append(a)
        # elementwise nodes may overwrite a buffer whose last consumer this
        # is; the allocation churn dominates otherwise
        own0 = node.inputs and node.inputs[0] in local and remaining[node.inputs[0]] == 1
        store_as = node.id
        if node.kind == "relu":
            z = ins[0]
            ctx = kink_ctx.get(node.id)
            if ctx is not None:
                base_mask, sens = ctx
                flipped = (z > 0) != base_mask
                if flipped.any():
                    kink_err += np.abs(z * sens * flipped).sum(axis=(1, 2, 3))
            if own0:
                y = z
                np.maximum(y, 0, out=y)
            else:
                y = np.maximum(z, 0)
        elif node.kind == "conv" and node.id in ex.conv_bn:
            bn = ex.conv_bn[node.id]
            y = ex.eval_node(node, ins)
            scale, shift = ex.bn_aff(bn.id)
            y *= scale
            y += shift
            fused.add(bn.id)
            store_as = bn.id
        elif node.kind == "bn" and own0:
            scale, shift = ex.bn_aff(node.id)
            y = ins[0]
            y *= scale
            y += shift
        elif node.kind == "add" and own0 and ins[0].shape == ins[1].shape:
            y = ins[0]
            y += ins[1]
        else:
            y = ex.eval_node(node, ins)
        for src in node.inputs:
            if src in local:
                remaining[src] -= 1
                if remaining[src] == 0 and src != output_id and local[src] is not y:
                    del local[src]
        local[store_as] = y
        if store_as == output_id:
            out = y
    if out is None:  # parameter does not reach the output; treat as constant
        out = np.broadcast_to(base[output_id], (b,) + base[output_id].shape[1:])
    return out, kink_err


class _GcState:
    """Shared read-only state for the per-tensor check, inherited by forked
    workers without serialization."""

    def __init__(self, graph, ex, acts, pgrads, kink_ctx, eps, tolerance, sample_count, seed):
        self.graph = graph
        self.ex = ex
        self.acts = acts
        self.pgrads = pgrads
        self.kink_ctx = kink_ctx
        self.eps = eps
        self.tolerance = tolerance
        self.sample_count = sample_count
        self.seed = seed
        self.desc_cache: dict[str, list[Node]] = {}


def _check_entry(st: _GcState, entry: tuple[str, str, str, tuple[int, ...]]) -> ParamCheck:
    name, node_id, kind, shape = entry
    graph, ex, acts, eps = st.graph, st.ex, st.acts, st.eps
    node = graph.node(node_id)
    size = int(np.prod(shape))
    analytic = np.asarray(st.pgrads.get(name, np.zeros(shape))).reshape(-1)
    rng = np.random.default_rng((st.seed ^ _fnv1a64(name)) & 0xFFFFFFFFFFFFFFFF)
    order = rng.permutation(size)
    want = min(st.sample_count, size)
    sub = st.desc_cache.get(node_id)
    if sub is None:
        sub = st.desc_cache[node_id] = _descendants(graph, node_id)
    base_out = acts[node_id]
    x_in = acts[node.inputs[0]]
    win = None
    if kind == "conv.w":
        a = node.attrs
        win = ops.conv_windows(x_in, a["k"], a["stride"], a["pad"])
    gap_budget = 0.5 * st.tolerance
    checked = skipped = 0
    pos = 0
    max_rel = 0.0
    # sample at least `want` coordinates; hunt past that for kink-free
    # intervals only up to twice the request, then report what held
    budget = min(2 * want, size)
    while checked < want and pos < budget:
        chunk = order[pos : pos + min(budget - pos, want - checked + 4, 24)]
        pos += len(chunk)
        if kind == "bn.var":  # keep var + eps positive on the minus side
            ok = ex.params[f"{node_id}.var"][chunk] - eps + BN_EPS > 0
            skipped += int((~ok).sum())
            chunk = chunk[ok]
            if len(chunk) == 0:
                continue
        k = len(chunk)
        lanes = _stacked_patch(kind, node, chunk, eps, base_out, x_in, ex.params, win)
        out_lanes, kink_err = _batched_replay(
            ex, sub, acts, node_id, lanes, graph.output_id, st.kink_ctx
        )
        # subtract before reducing: the elementwise deltas are tiny and
        # nearly equal in exponent, so these means are almost exact
        fd = (out_lanes[:k] - out_lanes[k:]).mean(axis=(1, 2, 3)) / (2 * eps)
        # sensitivities already carry the 1/size of the mean loss
        bound = (kink_err[:k] + kink_err[k:]) / (2 * eps)
        for i, idx in enumerate(chunk):
            if checked >= want:
                break
            a_val = float(analytic[idx])
            denom = max(abs(a_val), abs(float(fd[i])), 1e-8)
            if bound[i] > gap_budget * denom:
                skipped += 1
                continue
            rel = abs(a_val - float(fd[i])) / denom
            max_rel = max(max_rel, rel)
            checked += 1
    return ParamCheck(
        name=name,
        size=size,
        sampled=pos,
        checked=checked,
        skipped_kinks=skipped,
        max_rel_err=max_rel,
    )


_FORK_STATE: list = []  # [state, entries]; populated around the fork


def _blas_single_thread():
    """Single-threaded BLAS for the per-tensor phase: forked workers would
    otherwise oversubscribe the cores, and limiting both the parallel and
    the sequential path keeps their results bit-identical."""
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except ImportError:
        import contextlib

        return contextlib.nullcontext()


def _gc_worker(args: tuple[int, int]) -> list[ParamCheck]:
    worker, stride = args
    st, entries = _FORK_STATE
    with _blas_single_thread():
        return [_check_entry(st, e) for e in entries[worker::stride]]


def gradcheck(
    graph: LayerGraph,
    store: WeightStore,
    x: Tensor | np.ndarray,
    eps: float = 1e-4,
    tolerance: float = 1e-5,
    sample_count: int = 20,
    seed: int = 0,
    workers: int | None = None,
) -> GradCheckReport:
    """Verify reverse-mode gradients of every parameter tensor.

    For each parameter, at least ``sample_count`` coordinates are drawn by
    seeded sampling (all of them for smaller tensors) and compared against
    central differences of the mean-of-output loss; the relative error
    denominator is ``max(|analytic|, |numeric|, 1e-8)``.  Coordinates whose
    ±eps interval provably straddles a ReLU kink large enough to disturb
    the comparison are reported as skipped, and up to ``2 * sample_count``
    draws are spent looking for clean replacements.  Results do not depend
    on ``workers``.
    """
    start = time.monotonic()
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    arr = arr.astype(np.float64)
    if not graph.shaped:
        graph = infer_shapes(graph, tuple(arr.shape))
    store64 = store.astype(np.float64)
    ex = _Exec(graph, store64, np.float64)

    out, acts = run_forward(graph, store64, arr, keep_activations=True)
    out_grad = np.full(out.shape, 1.0 / out.size, dtype=np.float64)
    relu_ids = {n.id for n in graph.nodes if n.kind == "relu"}
    pgrads, _, relu_grads = run_backward(graph, store64, acts, out_grad, collect=relu_ids)
    for name, g in pgrads.items():
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"analytic gradient of {name} is not finite")

    # Baseline ReLU states and sensitivities let the replay bound the loss
    # error a finite difference suffers when an interval straddles a kink;
    # coordinates whose bound could eat into the pass threshold are skipped.
    kink_ctx = {
        nid: (acts[graph.node(nid).inputs[0]] > 0, np.abs(g)) for nid, g in relu_grads.items()
    }
    st = _GcState(graph, ex, acts, pgrads, kink_ctx, eps, tolerance, sample_count, seed)
    entries = param_entries(graph)

    if workers is None:
        workers = min(2, os.cpu_count() or 1)
    results: list[ParamCheck]
    if workers > 1 and hasattr(os, "fork"):
        import multiprocessing as mp

        _FORK_STATE[:] = [st, entries]
        try:
            with mp.get_context("fork").Pool(workers) as pool:
                parts = pool.map(_gc_worker, [(w, workers) for w in range(workers)])
        finally:
            _FORK_STATE.clear()
        by_name = {p.name: p for part in parts for p in part}
        results = [by_name[name] for name, _, _, _ in entries]
    else:
        with _blas_single_thread():
            results = [_check_entry(st, e) for e in entries]

    return GradCheckReport(
        eps=eps,
        tolerance=tolerance,
        dtype="float64",
        sample_count=sample_count,
        seed=seed,
        params=tuple(results),
        elapsed_seconds=time.monotonic() - start,
    )


def verification_input(shape: tuple[int, int, int, int], seed: int = 0) -> Tensor:
    """Deterministic standard-normal input for verification runs."""
    count = int(np.prod(shape))
    return Tensor(_normals(seed, "verification-input", count).astype(np.float32).reshape(shape))
