"""Function-preserving structure transformations between architectures.

Four primitive rewrites connect the members of the network family:

* ``to_wider``   adds output channels/units by replicating randomly
  chosen existing ones and splitting their outgoing weights, so the
  widened net computes the same function (up to float rounding).
* ``to_deeper``  inserts an identity-initialised ReLU layer (dense
  identity matrix, or a centre-tap channel-diagonal conv), which is
  exact on the non-negative activations that follow a ReLU.
* ``to_narrower`` deletes trailing channels/units and redistributes the
  deleted outgoing weight mass uniformly over the survivors, conserving
  every downstream per-slot weight sum bitwise.
* ``to_shallower`` deletes a layer whose in/out dims agree.

``union_arch`` computes the smallest family member that can host every
client (per-stage max depth, per-position max width), ``diff_arch``
plans a transformation between two members, and ``net_change`` applies
such a plan.  Plans grow first (Deepen, then Widen, ascending layer
index) and shrink second (Narrow descending, then Shallow descending),
so every intermediate stack is valid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .arch import CONV_KERNEL, POOL_WINDOW, ArchitectureSpec, LayerSpec, validate_arch
from .errors import IncompatibilityError, UnsupportedTransformError
from .nn import ModelParams
from .seeding import derive_seed

NeuronMap = dict[int, tuple[int, ...]]


def _param_slot(arch: ArchitectureSpec, layer_index: int) -> int:
    try:
        return arch.parametric_indices.index(layer_index)
    except ValueError:
        raise ValueError(f"layer {layer_index} is not a conv/dense layer") from None


def _next_parametric(arch: ArchitectureSpec, layer_index: int) -> int:
    for i in range(layer_index + 1, len(arch.layers)):
        if arch.layers[i].parametric:
            return i
    raise ValueError(f"layer {layer_index} has no downstream parametric layer")


def _flatten_block(arch: ArchitectureSpec) -> int:
    """Spatial positions per channel at the flatten layer (H' * W')."""
    h, w = arch.input_shape[1], arch.input_shape[2]
    for layer in arch.layers:
        if layer.kind == "pool":
            h, w = h // POOL_WINDOW, w // POOL_WINDOW
    return h * w


def to_wider(
    model: ModelParams, layer_index: int, target_width: int, seed: int
) -> tuple[ModelParams, NeuronMap]:
    """Widen one conv/dense layer to ``target_width`` outputs.

    Each new unit replicates a uniformly drawn existing unit (incoming
    weights and bias copied); the outgoing weights of every member of a
    replication set are divided by the set size, so the function is
    preserved.  Returns the widened model and the replication sets keyed
    by original unit index.
    """
    arch = model.arch
    slot = _param_slot(arch, layer_index)
    if layer_index == arch.classifier_index:
        raise UnsupportedTransformError("cannot widen the classifier layer")
    layer = arch.layers[layer_index]
    cur = layer.out_dim
    if target_width <= cur:
        raise ValueError(f"target width {target_width} must exceed current width {cur}")

    rng = np.random.default_rng(seed)
    sources = rng.integers(0, cur, size=target_width - cur)
    w, b = model.params[slot]
    w_new = np.concatenate([w, w[sources]], axis=0)
    b_new = np.concatenate([b, b[sources]])

    groups: dict[int, list[int]] = {i: [i] for i in range(cur)}
    for j, src in enumerate(sources):
        groups[int(src)].append(cur + j)
    neuron_map: NeuronMap = {i: tuple(members) for i, members in groups.items()}
    sizes = np.ones(target_width)
    for members in neuron_map.values():
        if len(members) > 1:
            sizes[list(members)] = len(members)

    nxt = _next_parametric(arch, layer_index)
    wn, bn = model.params[slot + 1]
    nxt_layer = arch.layers[nxt]
    if layer.kind == "conv" and nxt_layer.kind == "conv":
        ext = np.concatenate([wn, wn[:, sources]], axis=1) / sizes[None, :, None, None]
        nxt_in = target_width
    elif layer.kind == "dense":
        ext = np.concatenate([wn, wn[:, sources]], axis=1) / sizes[None, :]
        nxt_in = target_width
    else:  # conv feeding a dense layer through flatten
        block = _flatten_block(arch)
        grouped = wn.reshape(wn.shape[0], cur, block)
        ext = np.concatenate([grouped, grouped[:, sources]], axis=1) / sizes[None, :, None]
        ext = ext.reshape(wn.shape[0], target_width * block)
        nxt_in = target_width * block

    layers = list(arch.layers)
    layers[layer_index] = replace(layer, out_dim=target_width)
    layers[nxt] = replace(nxt_layer, in_dim=nxt_in)
    new_arch = ArchitectureSpec(tuple(layers), arch.input_shape, arch.num_classes)
    validate_arch(new_arch)
    params = list(model.params)
    params[slot] = (w_new, b_new)
    params[slot + 1] = (ext, bn)
    return ModelParams(new_arch, tuple(params)), neuron_map


def to_deeper(
    model: ModelParams, insert_index: int, template_layer_index: int | None = None
) -> ModelParams:
    """Insert an identity-initialised ReLU layer at ``insert_index``.

    The insertion point must sit downstream of a ReLU-activated layer
    (pool/flatten may intervene), so the identity composed with the
    extra ReLU is exact.  ``template_layer_index`` names the layer whose
    structure the new layer copies; None infers kind and width from the
    insertion context.
    """
    arch = model.arch
    layers = arch.layers
    if insert_index < 1 or insert_index > len(layers) - 1:
        raise ValueError(f"insert index {insert_index} is out of range")
    j = insert_index - 1
    while j >= 0 and not layers[j].parametric:
        j -= 1
    if j < 0 or layers[j].activation != "relu":
        raise UnsupportedTransformError(
            f"cannot insert at {insert_index}: upstream layer is not ReLU-activated"
        )
    trace = validate_arch(arch)
    prev_shape = trace[insert_index - 1]
    dim = prev_shape[0]
    kind = "conv" if insert_index <= arch.flatten_index else "dense"
    if template_layer_index is not None:
        template = layers[template_layer_index]
        if not template.parametric:
            raise ValueError(f"template layer {template_layer_index} is not conv/dense")
        if template.kind != kind:
            raise IncompatibilityError(
                f"template layer {template_layer_index} is {template.kind}, "
                f"insertion point needs {kind}"
            )
        if template.out_dim != dim:
            raise IncompatibilityError(
                f"template width {template.out_dim} does not match insertion width {dim}"
            )

    if kind == "conv":
        w = np.zeros((dim, dim, CONV_KERNEL, CONV_KERNEL))
        centre = CONV_KERNEL // 2
        w[np.arange(dim), np.arange(dim), centre, centre] = 1.0
    else:
        w = np.eye(dim)
    b = np.zeros(dim)

    new_layers = list(layers)
    new_layers.insert(insert_index, LayerSpec(kind, dim, dim, "relu"))
    new_arch = ArchitectureSpec(tuple(new_layers), arch.input_shape, arch.num_classes)
    validate_arch(new_arch)
    slot = sum(1 for l in layers[:insert_index] if l.parametric)
    params = list(model.params)
    params.insert(slot, (w, b))
    return ModelParams(new_arch, tuple(params))


def _conserving_shrink(a: np.ndarray, n_keep: int) -> np.ndarray:
    """Drop trailing entries of the last axis, spreading their mass.

    Every kept entry gains (deleted sum)/n_keep; tiny rounding residues
    are then folded into the smallest-magnitude kept entry until the sum
    along the last axis equals np.sum of the original bitwise.
    """
    target = a.sum(axis=-1)
    kept = a[..., :n_keep] + a[..., n_keep:].sum(axis=-1, keepdims=True) / n_keep
    for _ in range(32):
        residual = target - kept.sum(axis=-1)
        if not residual.any():
            break
        j = np.abs(kept).argmin(axis=-1)[..., None]
        current = np.take_along_axis(kept, j, axis=-1)
        np.put_along_axis(kept, j, current + residual[..., None], axis=-1)
    return kept


def to_narrower(model: ModelParams, layer_index: int, target_width: int) -> ModelParams:
    """Shrink one conv/dense layer to its first ``target_width`` units.

    Units at index >= target_width are deleted.  For every downstream
    weight slot, the deleted outgoing weights' sum s is redistributed as
    s/target_width onto each surviving outgoing weight, so per-slot sums
    are conserved exactly (see _conserving_shrink).
    """
    arch = model.arch
    slot = _param_slot(arch, layer_index)
    if layer_index == arch.classifier_index:
        raise UnsupportedTransformError("cannot narrow the classifier layer")
    layer = arch.layers[layer_index]
    cur = layer.out_dim
    if not 0 < target_width < cur:
        raise ValueError(f"target width {target_width} must be in [1, {cur - 1}]")

    w, b = model.params[slot]
    w_new = w[:target_width].copy()
    b_new = b[:target_width].copy()

    nxt = _next_parametric(arch, layer_index)
    wn, bn = model.params[slot + 1]
    nxt_layer = arch.layers[nxt]
    if layer.kind == "conv" and nxt_layer.kind == "conv":
        shrunk = _conserving_shrink(np.moveaxis(wn, 1, -1), target_width)
        ext = np.moveaxis(shrunk, -1, 1)
        nxt_in = target_width
    elif layer.kind == "dense":
        ext = _conserving_shrink(wn, target_width)
        nxt_in = target_width
    else:  # conv feeding a dense layer through flatten
        block = _flatten_block(arch)
        grouped = wn.reshape(wn.shape[0], cur, block)
        shrunk = _conserving_shrink(np.moveaxis(grouped, 1, -1), target_width)
        ext = np.moveaxis(shrunk, -1, 1).reshape(wn.shape[0], target_width * block)
        nxt_in = target_width * block

    layers = list(arch.layers)
    layers[layer_index] = replace(layer, out_dim=target_width)
    layers[nxt] = replace(nxt_layer, in_dim=nxt_in)
    new_arch = ArchitectureSpec(tuple(layers), arch.input_shape, arch.num_classes)
    validate_arch(new_arch)
    params = list(model.params)
    params[slot] = (w_new, b_new)
    params[slot + 1] = (np.ascontiguousarray(ext), bn)
    return ModelParams(new_arch, tuple(params))


def to_shallower(model: ModelParams, remove_index: int) -> ModelParams:
    """Delete one conv/dense layer whose in/out dims agree."""
    arch = model.arch
    slot = _param_slot(arch, remove_index)
    if remove_index == arch.classifier_index:
        raise UnsupportedTransformError("cannot remove the classifier layer")
    layer = arch.layers[remove_index]
    if layer.in_dim != layer.out_dim:
        raise IncompatibilityError(
            f"layer {remove_index} maps {layer.in_dim} -> {layer.out_dim}; "
            "only square layers can be removed"
        )
    if layer.kind == "conv":
        stage = next(s for s in arch.conv_stages() if remove_index in s)
        if len(stage) == 1:
            raise UnsupportedTransformError(
                f"layer {remove_index} is the only conv of its stage"
            )
    layers = list(arch.layers)
    del layers[remove_index]
    new_arch = ArchitectureSpec(tuple(layers), arch.input_shape, arch.num_classes)
    validate_arch(new_arch)
    params = list(model.params)
    del params[slot]
    return ModelParams(new_arch, tuple(params))


def union_arch(archs: list[ArchitectureSpec]) -> ArchitectureSpec:
    """Smallest family member hosting every input architecture.

    Per stage: max conv count, and per conv position the max width over
    the architectures that have that position.  Same rule for the head.
    All inputs must share input shape, class count, and stage count.
    """
    if not archs:
        raise ValueError("union of zero architectures is undefined")
    base = archs[0]
    validate_arch(base)
    for i, a in enumerate(archs[1:], start=1):
        validate_arch(a)
        if a.input_shape != base.input_shape:
            raise IncompatibilityError(
                f"arch {i} input shape {a.input_shape} != {base.input_shape}"
            )
        if a.num_classes != base.num_classes:
            raise IncompatibilityError(
                f"arch {i} has {a.num_classes} classes, expected {base.num_classes}"
            )
        if len(a.stage_widths()) != len(base.stage_widths()):
            raise IncompatibilityError(
                f"arch {i} has {len(a.stage_widths())} stages, "
                f"expected {len(base.stage_widths())}"
            )

    all_stages = [a.stage_widths() for a in archs]
    union_stages = []
    for s in range(len(base.stage_widths())):
        depth = max(len(st[s]) for st in all_stages)
        union_stages.append(
            [max(st[s][p] for st in all_stages if p < len(st[s])) for p in range(depth)]
        )
    all_heads = [a.head_widths() for a in archs]
    depth = max(len(h) for h in all_heads)
    union_head = [max(h[p] for h in all_heads if p < len(h)) for p in range(depth)]

    from .arch import make_arch

    return make_arch(base.input_shape, base.num_classes, union_stages, union_head)


@dataclass(frozen=True)
class WidenStep:
    layer_index: int
    target_width: int


@dataclass(frozen=True)
class DeepenStep:
    insert_index: int
    template_layer_index: int | None


@dataclass(frozen=True)
class NarrowStep:
    layer_index: int
    target_width: int


@dataclass(frozen=True)
class ShallowStep:
    remove_index: int


Step = WidenStep | DeepenStep | NarrowStep | ShallowStep


@dataclass(frozen=True)
class TransformPlan:
    """Ordered rewrite steps taking one architecture to another."""

    steps: tuple[Step, ...]

    def __len__(self) -> int:
        return len(self.steps)


class _Skeleton:
    """Mutable width/depth bookkeeping used while planning a diff."""

    def __init__(self, arch: ArchitectureSpec):
        self.stages = [list(s) for s in arch.stage_widths()]
        self.head = list(arch.head_widths())
        self.input_shape = arch.input_shape

    def conv_index(self, s: int, p: int) -> int:
        return sum(len(st) + 1 for st in self.stages[:s]) + p

    def flatten_index(self) -> int:
        return sum(len(st) + 1 for st in self.stages)

    def head_index(self, j: int) -> int:
        return self.flatten_index() + 1 + j

    def flat_features(self) -> int:
        c, h, w = self.input_shape
        for _ in self.stages:
            h, w = h // POOL_WINDOW, w // POOL_WINDOW
        channels = self.stages[-1][-1] if self.stages else c
        return channels * h * w


def diff_arch(src: ArchitectureSpec, dst: ArchitectureSpec) -> TransformPlan:
    """Plan the rewrite steps taking ``src`` to ``dst``.

    Growth first (Deepen, then Widen, ascending indices), shrinkage
    second (Narrow descending, then Shallow descending).  Layers beyond
    the target depth are first brought to the width of the last
    surviving layer so that removals always splice cleanly.  Equal
    architectures give an empty plan.
    """
    validate_arch(src)
    validate_arch(dst)
    if src.input_shape != dst.input_shape:
        raise IncompatibilityError(f"input shapes differ: {src.input_shape} vs {dst.input_shape}")
    if src.num_classes != dst.num_classes:
        raise IncompatibilityError(f"class counts differ: {src.num_classes} vs {dst.num_classes}")
    if len(src.stage_widths()) != len(dst.stage_widths()):
        raise IncompatibilityError(
            f"stage counts differ: {len(src.stage_widths())} vs {len(dst.stage_widths())}"
        )

    sk = _Skeleton(src)
    dst_stages = dst.stage_widths()
    dst_head = dst.head_widths()
    steps: list[Step] = []

    # Grow: append identity layers where dst is deeper (ascending).
    for s, target in enumerate(dst_stages):
        while len(sk.stages[s]) < len(target):
            insert = sk.conv_index(s, len(sk.stages[s]))
            steps.append(DeepenStep(insert, insert - 1))
            sk.stages[s].append(sk.stages[s][-1])
    while len(sk.head) < len(dst_head):
        j = len(sk.head)
        insert = sk.head_index(j)
        steps.append(DeepenStep(insert, insert - 1 if j > 0 else None))
        sk.head.append(sk.head[-1] if sk.head else sk.flat_features())

    # Grow: widen positions where dst is wider (ascending).
    for s, target in enumerate(dst_stages):
        for p, width in enumerate(target):
            if width > sk.stages[s][p]:
                steps.append(WidenStep(sk.conv_index(s, p), width))
                sk.stages[s][p] = width
    for j, width in enumerate(dst_head):
        if width > sk.head[j]:
            steps.append(WidenStep(sk.head_index(j), width))
            sk.head[j] = width

    # Doomed layers must reach the width of the last surviving layer so
    # that in == out holds when they are removed; widen the narrow ones.
    for s, target in enumerate(dst_stages):
        base = target[-1]
        for p in range(len(target), len(sk.stages[s])):
            if sk.stages[s][p] < base:
                steps.append(WidenStep(sk.conv_index(s, p), base))
                sk.stages[s][p] = base
    head_base = dst_head[-1] if dst_head else (
        _Skeleton(dst).flat_features() if len(sk.head) > len(dst_head) else 0
    )
    for j in range(len(dst_head), len(sk.head)):
        if sk.head[j] < head_base:
            steps.append(WidenStep(sk.head_index(j), head_base))
            sk.head[j] = head_base

    # Shrink: narrow (descending layer index).
    narrows: list[tuple[int, int, tuple]] = []
    for s, target in enumerate(dst_stages):
        base = target[-1]
        for p in range(len(sk.stages[s])):
            want = target[p] if p < len(target) else base
            if want < sk.stages[s][p]:
                narrows.append((sk.conv_index(s, p), want, ("stage", s, p)))
    for j in range(len(sk.head)):
        want = dst_head[j] if j < len(dst_head) else head_base
        if want < sk.head[j]:
            narrows.append((sk.head_index(j), want, ("head", j)))
    for index, want, where in sorted(narrows, reverse=True):
        steps.append(NarrowStep(index, want))
        if where[0] == "stage":
            sk.stages[where[1]][where[2]] = want
        else:
            sk.head[where[1]] = want

    # Shrink: remove doomed layers (descending layer index).
    for j in range(len(sk.head) - 1, len(dst_head) - 1, -1):
        steps.append(ShallowStep(sk.head_index(j)))
        sk.head.pop()
    for s in range(len(sk.stages) - 1, -1, -1):
        for p in range(len(sk.stages[s]) - 1, len(dst_stages[s]) - 1, -1):
            steps.append(ShallowStep(sk.conv_index(s, p)))
            sk.stages[s].pop()

    return TransformPlan(tuple(steps))


def apply_plan(model: ModelParams, plan: TransformPlan, seed: int) -> ModelParams:
    """Apply the plan's steps in order; widening randomness derives from
    (seed, step ordinal)."""
    for i, step in enumerate(plan.steps):
        if isinstance(step, WidenStep):
            model, _ = to_wider(
                model, step.layer_index, step.target_width, derive_seed(seed, "widen", i)
            )
        elif isinstance(step, DeepenStep):
            model = to_deeper(model, step.insert_index, step.template_layer_index)
        elif isinstance(step, NarrowStep):
            model = to_narrower(model, step.layer_index, step.target_width)
        else:
            model = to_shallower(model, step.remove_index)
    return model


def net_change(model: ModelParams, dst: ArchitectureSpec, seed: int) -> ModelParams:
    """Morph ``model`` into architecture ``dst``.

    Returns the input model object unchanged when the architectures are
    already equal.
    """
    plan = diff_arch(model.arch, dst)
    if not plan.steps:
        return model
    out = apply_plan(model, plan, seed)
    if out.arch != dst:
        raise IncompatibilityError("internal error: plan did not reach the target architecture")
    return out
