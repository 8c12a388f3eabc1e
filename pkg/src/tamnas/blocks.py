"""Choice blocks of the search space.

Three families share one code path:

* ``shufflev2``  - ShuffleNetV2 unit, k x k depthwise in the main branch
* ``xception``   - ShuffleNetV2 unit whose main branch is three
  depthwise/pointwise pairs
* ``robust``     - stand-alone non-local attention + SE with a residual add

The first two may carry a non-local layer (embedded-Gaussian or Gaussian)
after the last pointwise conv of the main branch. All of them end with an
SE layer.

Each block is described by a *plan*: the ordered list of parameter shapes
together with the axes that scale with the channel selector. Building,
parameter counting and weight-sharing slices all derive from the plan.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .engine import Tensor
from .errors import IllegalPlacementError, InvalidKernelError, TamNasError

KERNELS = (3, 5, 7)
CHANNEL_RATIOS = tuple(round(0.2 * (i + 1), 1) for i in range(10))
SE_REDUCTION = 4
NONLOCAL_REDUCTION = 2
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class BlockSpec:
    base: str  # "shufflev2" | "xception" | "robust"
    kernel: int | None
    nonlocal_kind: str | None = None  # None | "embedded" | "gaussian"
    trailing_bn: bool = False
    has_se: bool = True

    def __post_init__(self):
        if self.base not in ("shufflev2", "xception", "robust"):
            raise TamNasError(f"unknown block base {self.base!r}")
        if self.nonlocal_kind not in (None, "embedded", "gaussian"):
            raise TamNasError(f"unknown non-local kind {self.nonlocal_kind!r}")
        if self.base == "robust":
            if self.kernel is not None or self.nonlocal_kind is None:
                raise TamNasError("pure robust blocks need a non-local layer and no kernel")
        else:
            if self.kernel not in KERNELS:
                raise InvalidKernelError(f"kernel must be one of {KERNELS}, got {self.kernel}")
            if self.trailing_bn:
                raise TamNasError("trailing BN exists only on pure robust blocks")

    @property
    def pure_robust(self) -> bool:
        return self.base == "robust"

    @property
    def label(self) -> str:
        if self.pure_robust:
            tag = "NE" if self.nonlocal_kind == "embedded" else "NG"
            return tag + ("+BN" if self.trailing_bn else "")
        tag = "S" if self.base == "shufflev2" else "SX"
        if self.nonlocal_kind:
            tag += "+NE" if self.nonlocal_kind == "embedded" else "+NG"
        return f"{tag} k{self.kernel}"


def _all_specs() -> tuple:
    specs = []
    for nl in (None, "embedded", "gaussian"):
        for base in ("shufflev2", "xception"):
            for k in KERNELS:
                specs.append(BlockSpec(base, k, nl))
    specs += [
        BlockSpec("robust", None, "embedded", trailing_bn=True),
        BlockSpec("robust", None, "embedded"),
        BlockSpec("robust", None, "gaussian", trailing_bn=True),
        BlockSpec("robust", None, "gaussian"),
    ]
    return tuple(specs)


BLOCK_SPECS = _all_specs()
NUM_BLOCKS = len(BLOCK_SPECS)
STRIDE2_BLOCKS = tuple(i for i, s in enumerate(BLOCK_SPECS) if not s.pure_robust)


def mid_channels(out_ch: int, ratio: float) -> int:
    """Selector-scaled intermediate width, rounding half up."""
    return max(1, int(math.floor(ratio * (out_ch // 2) + 0.5 + 1e-9)))


# --------------------------------------------------------------------------
# plans


@dataclass(frozen=True)
class PlanEntry:
    name: str
    shape: tuple
    kind: str  # "weight" | "bias" | "gamma" | "beta"
    width_axes: tuple = ()


class _Plan:
    def __init__(self):
        self.entries: list[PlanEntry] = []
        self.buffers: list[PlanEntry] = []

    def conv(self, name, out_c, in_c, k=1, bias=False, out_w=False, in_w=False):
        axes = tuple(a for a, flag in ((0, out_w), (1, in_w)) if flag)
        self.entries.append(PlanEntry(f"{name}.w", (out_c, in_c, k, k), "weight", axes))
        if bias:
            self.entries.append(PlanEntry(f"{name}.b", (out_c,), "bias", (0,) if out_w else ()))

    def dw(self, name, c, k, width=False):
        self.entries.append(PlanEntry(f"{name}.w", (c, 1, k, k), "weight", (0,) if width else ()))

    def fc(self, name, out_f, in_f):
        self.entries.append(PlanEntry(f"{name}.w", (out_f, in_f), "weight"))
        self.entries.append(PlanEntry(f"{name}.b", (out_f,), "bias"))

    def bn(self, name, c, width=False):
        axes = (0,) if width else ()
        self.entries.append(PlanEntry(f"{name}.g", (c,), "gamma", axes))
        self.entries.append(PlanEntry(f"{name}.b", (c,), "beta", axes))
        self.buffers.append(PlanEntry(f"{name}.rm", (c,), "mean", axes))
        self.buffers.append(PlanEntry(f"{name}.rv", (c,), "var", axes))

    def se(self, name, c):
        hid = max(1, c // SE_REDUCTION)
        self.fc(f"{name}.fc1", hid, c)
        self.fc(f"{name}.fc2", c, hid)

    def nonlocal_layer(self, name, kind, c, inner, width):
        if kind == "embedded":
            self.conv(f"{name}.theta", inner, c, bias=True, out_w=width)
            self.conv(f"{name}.phi", inner, c, bias=True, out_w=width)
        self.conv(f"{name}.g", inner, c, bias=True, out_w=width)
        self.conv(f"{name}.wz", c, inner, bias=True, in_w=width)


def branch_channels(in_ch: int, out_ch: int, stride: int) -> tuple:
    """(main-branch input, main-branch output) channel counts."""
    if stride == 1:
        return in_ch // 2, out_ch - in_ch // 2
    return in_ch, out_ch - in_ch


def block_plan(spec: BlockSpec, in_ch: int, out_ch: int, stride: int, mid: int) -> _Plan:
    plan = _Plan()
    if spec.pure_robust:
        plan.nonlocal_layer("nl", spec.nonlocal_kind, out_ch, mid, width=True)
        plan.se("se", out_ch)
        if spec.trailing_bn:
            plan.bn("bn", out_ch)
        return plan
    k = spec.kernel
    b_in, b_out = branch_channels(in_ch, out_ch, stride)
    if stride == 2:
        plan.dw("proj.dw", in_ch, k)
        plan.bn("proj.bn1", in_ch)
        plan.conv("proj.pw", in_ch, in_ch)
        plan.bn("proj.bn2", in_ch)
    if spec.base == "shufflev2":
        plan.conv("pw1", mid, b_in, out_w=True)
        plan.bn("bn1", mid, width=True)
        plan.dw("dw", mid, k, width=True)
        plan.bn("bn2", mid, width=True)
        plan.conv("pw2", b_out, mid, in_w=True)
        plan.bn("bn3", b_out)
    else:
        plan.dw("dw1", b_in, k)
        plan.bn("bn1", b_in)
        plan.conv("pw1", mid, b_in, out_w=True)
        plan.bn("bn2", mid, width=True)
        plan.dw("dw2", mid, k, width=True)
        plan.bn("bn3", mid, width=True)
        plan.conv("pw2", mid, mid, out_w=True, in_w=True)
        plan.bn("bn4", mid, width=True)
        plan.dw("dw3", mid, k, width=True)
        plan.bn("bn5", mid, width=True)
        plan.conv("pw3", b_out, mid, in_w=True)
        plan.bn("bn6", b_out)
    if spec.nonlocal_kind:
        inner = max(1, b_out // NONLOCAL_REDUCTION)
        plan.nonlocal_layer("nl", spec.nonlocal_kind, b_out, inner, width=False)
    plan.se("se", b_out)
    return plan


def plan_param_count(plan: _Plan) -> int:
    return sum(int(np.prod(e.shape)) for e in plan.entries)


# --------------------------------------------------------------------------
# instances


def init_param(entry: PlanEntry, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if entry.kind == "weight":
        fan_in = int(np.prod(entry.shape[1:]))
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=entry.shape).astype(dtype)
    if entry.kind in ("gamma", "var"):
        return np.ones(entry.shape, dtype=dtype)
    return np.zeros(entry.shape, dtype=dtype)


@dataclass
class BlockInstance:
    spec: BlockSpec
    in_channels: int
    out_channels: int
    stride: int
    mid_channels: int
    params: dict = field(default_factory=dict)  # name -> Tensor
    buffers: dict = field(default_factory=dict)  # name -> ndarray
    width_axes: dict = field(default_factory=dict)  # name -> axes scaled by the selector

    def param_count(self) -> int:
        return sum(t.data.size for t in self.params.values())


def _check_placement(spec: BlockSpec, in_ch: int, out_ch: int, stride: int):
    if stride not in (1, 2):
        raise TamNasError(f"stride must be 1 or 2, got {stride}")
    if spec.pure_robust and stride != 1:
        raise IllegalPlacementError(f"pure robust block {spec.label} cannot sit in a stride-2 layer")
    if stride == 1 and in_ch != out_ch:
        raise TamNasError(f"stride-1 block needs in == out channels, got {in_ch} -> {out_ch}")
    if stride == 2 and out_ch <= in_ch:
        raise TamNasError(f"stride-2 block must widen, got {in_ch} -> {out_ch}")


def build_block(
    spec: BlockSpec,
    in_ch: int,
    out_ch: int,
    stride: int,
    channel_ratio: float,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> BlockInstance:
    if not any(abs(channel_ratio - r) < 1e-9 for r in CHANNEL_RATIOS):
        raise TamNasError(f"channel ratio {channel_ratio} not in {CHANNEL_RATIOS}")
    _check_placement(spec, in_ch, out_ch, stride)
    rng = rng if rng is not None else np.random.default_rng(0)
    mid = mid_channels(out_ch, channel_ratio)
    plan = block_plan(spec, in_ch, out_ch, stride, mid)
    inst = BlockInstance(spec, in_ch, out_ch, stride, mid)
    for e in plan.entries:
        inst.params[e.name] = Tensor(init_param(e, rng, dtype), name=e.name)
        inst.width_axes[e.name] = e.width_axes
    for e in plan.buffers:
        inst.buffers[e.name] = init_param(e, rng, dtype)
        inst.width_axes[e.name] = e.width_axes
    return inst


def width_slice(arr: np.ndarray, axes: tuple, mid: int) -> np.ndarray:
    """View of the first ``mid`` entries along every selector-scaled axis."""
    if not axes:
        return arr
    index = [slice(None)] * arr.ndim
    for a in axes:
        index[a] = slice(0, mid)
    return arr[tuple(index)]


def slice_block(full: BlockInstance, mid: int, copy: bool) -> BlockInstance:
    """Narrow a full-width instance to ``mid`` intermediate channels.

    With ``copy=False`` the result shares memory with ``full`` so training
    through it updates the full-width tensors in place.
    """
    if mid > full.mid_channels:
        raise TamNasError(f"cannot widen {full.mid_channels} -> {mid}")
    inst = BlockInstance(full.spec, full.in_channels, full.out_channels, full.stride, mid)
    inst.width_axes = dict(full.width_axes)
    for name, t in full.params.items():
        view = width_slice(t.data, full.width_axes[name], mid)
        inst.params[name] = Tensor(view.copy() if copy else view, name=name)
    for name, arr in full.buffers.items():
        view = width_slice(arr, full.width_axes[name], mid)
        inst.buffers[name] = view.copy() if copy else view
    return inst


# --------------------------------------------------------------------------
# forward


def _conv1x1(inst, name, x, bias=False):
    b = inst.params.get(f"{name}.b") if bias else None
    return ops.conv2d(x, inst.params[f"{name}.w"], b)


def _bn(inst, name, x, train):
    return ops.batch_norm(
        x,
        inst.params[f"{name}.g"],
        inst.params[f"{name}.b"],
        inst.buffers[f"{name}.rm"],
        inst.buffers[f"{name}.rv"],
        train,
        BN_MOMENTUM,
        BN_EPS,
    )


def _dw(inst, name, x, stride):
    w = inst.params[f"{name}.w"]
    k = w.shape[-1]
    if k not in KERNELS:
        raise InvalidKernelError(f"depthwise kernel must be one of {KERNELS}, got {k}")
    return ops.depthwise_conv2d(x, w, stride, k // 2)


def squeeze_excite(params: dict, prefix: str, x: Tensor, probe: dict | None = None) -> Tensor:
    """Channel gating; works on (N, C, H, W) or (N, C)."""
    s = ops.global_avg_pool(x) if x.ndim == 4 else x
    s = ops.relu(ops.fully_connected(s, params[f"{prefix}.fc1.w"], params[f"{prefix}.fc1.b"]))
    gate = ops.sigmoid(ops.fully_connected(s, params[f"{prefix}.fc2.w"], params[f"{prefix}.fc2.b"]))
    if probe is not None:
        probe[f"{prefix}.gate"] = gate.data
    if x.ndim == 4:
        gate = ops.reshape(gate, gate.shape + (1, 1))
    return ops.mul(x, gate)


def non_local(inst, prefix: str, kind: str, x: Tensor, probe: dict | None = None) -> Tensor:
    """Non-local attention with residual: x + Wz(softmax(pairwise) @ g(x))."""
    n, c, h, w = x.shape
    hw = h * w
    g = _conv1x1(inst, f"{prefix}.g", x, bias=True)
    m = g.shape[1]
    g = ops.transpose(ops.reshape(g, (n, m, hw)), (0, 2, 1))  # n, hw, m
    if kind == "embedded":
        theta = ops.reshape(_conv1x1(inst, f"{prefix}.theta", x, bias=True), (n, m, hw))
        phi = ops.reshape(_conv1x1(inst, f"{prefix}.phi", x, bias=True), (n, m, hw))
        pair = ops.matmul(ops.transpose(theta, (0, 2, 1)), phi)
    else:
        flat = ops.reshape(x, (n, c, hw))
        pair = ops.matmul(ops.transpose(flat, (0, 2, 1)), flat)
    attn = ops.softmax(pair, axis=-1)
    if probe is not None:
        probe[f"{prefix}.attention"] = attn.data
    y = ops.matmul(attn, g)  # n, hw, m
    y = ops.reshape(ops.transpose(y, (0, 2, 1)), (n, m, h, w))
    z = _conv1x1(inst, f"{prefix}.wz", y, bias=True)
    return ops.add(x, z)


def _main_branch(inst: BlockInstance, x: Tensor, train: bool, probe) -> Tensor:
    spec, s = inst.spec, inst.stride
    if spec.base == "shufflev2":
        h = ops.relu(_bn(inst, "bn1", _conv1x1(inst, "pw1", x), train))
        h = _bn(inst, "bn2", _dw(inst, "dw", h, s), train)
        h = ops.relu(_bn(inst, "bn3", _conv1x1(inst, "pw2", h), train))
    else:
        h = _bn(inst, "bn1", _dw(inst, "dw1", x, s), train)
        h = ops.relu(_bn(inst, "bn2", _conv1x1(inst, "pw1", h), train))
        h = _bn(inst, "bn3", _dw(inst, "dw2", h, 1), train)
        h = ops.relu(_bn(inst, "bn4", _conv1x1(inst, "pw2", h), train))
        h = _bn(inst, "bn5", _dw(inst, "dw3", h, 1), train)
        h = ops.relu(_bn(inst, "bn6", _conv1x1(inst, "pw3", h), train))
    if spec.nonlocal_kind:
        h = non_local(inst, "nl", spec.nonlocal_kind, h, probe)
    return squeeze_excite(inst.params, "se", h, probe)


def forward_block(inst: BlockInstance, x: Tensor, train: bool = False, probe: dict | None = None) -> Tensor:
    """Run one block. ``probe`` (optional dict) collects attention maps and SE gates."""
    if x.shape[1] != inst.in_channels:
        from .errors import ShapeError

        raise ShapeError("forward_block", "input.C", x.shape[1], "block.in_channels", inst.in_channels)
    spec = inst.spec
    if spec.pure_robust:
        h = non_local(inst, "nl", spec.nonlocal_kind, x, probe)
        h = squeeze_excite(inst.params, "se", h, probe)
        if spec.trailing_bn:
            h = _bn(inst, "bn", h, train)
        return ops.add(x, h)
    if inst.stride == 1:
        keep, main = ops.split(x, 1, inst.in_channels // 2)
    else:
        p = _bn(inst, "proj.bn1", _dw(inst, "proj.dw", x, 2), train)
        keep = ops.relu(_bn(inst, "proj.bn2", _conv1x1(inst, "proj.pw", p), train))
        main = x
    out = ops.concat([keep, _main_branch(inst, main, train, probe)], axis=1)
    return ops.channel_shuffle(out, 2)
