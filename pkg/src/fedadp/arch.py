"""Architecture descriptions for the small VGG-style network family.

An architecture is a flat stack of layers: zero or more convolutional
stages (each a run of 3x3 ReLU convs closed by a 2x2 max-pool), one
flatten, zero or more ReLU hidden dense layers, and a final linear
classifier.  Kernel size, stride, padding, and pool window are fixed by
design; width (channels / features) and depth are the only free axes,
which is exactly what the structure transformations manipulate.

Architectures have a canonical text form, e.g.::

    in=1x16x16 classes=10 stages=[c8,c8|c16] head=[d32]

meaning two conv stages (8->8 channels, then 16) and one hidden dense
layer of 32 units.  ``parse_arch`` accepts an optional trailing
``widen={s1.l0:24}`` group of width overrides.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import ArchitectureError

CONV_KERNEL = 3
POOL_WINDOW = 2


@dataclass(frozen=True)
class LayerSpec:
    """One layer of an architecture.

    ``kind`` is one of ``conv`` (3x3, stride 1, same padding), ``pool``
    (2x2 max-pool, stride 2), ``flatten``, or ``dense``.  ``in_dim`` and
    ``out_dim`` are channels for convs and features for dense layers;
    they are 0 for pool/flatten.  ``activation`` is ``"relu"`` or None.
    """

    kind: str
    in_dim: int = 0
    out_dim: int = 0
    activation: str | None = None

    @property
    def parametric(self) -> bool:
        return self.kind in ("conv", "dense")


def conv(in_channels: int, out_channels: int) -> LayerSpec:
    return LayerSpec("conv", in_channels, out_channels, "relu")


def pool() -> LayerSpec:
    return LayerSpec("pool")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def dense(in_features: int, out_features: int, activation: str | None = "relu") -> LayerSpec:
    return LayerSpec("dense", in_features, out_features, activation)


@dataclass(frozen=True)
class ArchitectureSpec:
    """An ordered layer stack plus its input/output contract."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))

    @property
    def stage_boundaries(self) -> tuple[int, ...]:
        """Indices of the pool layers that close each conv stage."""
        return tuple(i for i, l in enumerate(self.layers) if l.kind == "pool")

    @property
    def flatten_index(self) -> int:
        return next(i for i, l in enumerate(self.layers) if l.kind == "flatten")

    @property
    def classifier_index(self) -> int:
        return len(self.layers) - 1

    @property
    def parametric_indices(self) -> tuple[int, ...]:
        return tuple(i for i, l in enumerate(self.layers) if l.parametric)

    def conv_stages(self) -> list[list[int]]:
        """Layer indices of the convs in each stage."""
        stages: list[list[int]] = []
        current: list[int] = []
        for i, l in enumerate(self.layers):
            if l.kind == "conv":
                current.append(i)
            elif l.kind == "pool":
                stages.append(current)
                current = []
        return stages

    def head_indices(self) -> list[int]:
        """Layer indices of the hidden dense layers (classifier excluded)."""
        return [
            i
            for i, l in enumerate(self.layers)
            if l.kind == "dense" and i != self.classifier_index
        ]

    def stage_widths(self) -> list[list[int]]:
        return [[self.layers[i].out_dim for i in stage] for stage in self.conv_stages()]

    def head_widths(self) -> list[int]:
        return [self.layers[i].out_dim for i in self.head_indices()]

    def n_params(self) -> int:
        total = 0
        for l in self.layers:
            if l.kind == "conv":
                total += l.out_dim * l.in_dim * CONV_KERNEL * CONV_KERNEL + l.out_dim
            elif l.kind == "dense":
                total += l.out_dim * l.in_dim + l.out_dim
        return total


def validate_arch(arch: ArchitectureSpec) -> list[tuple[int, ...]]:
    """Check structural invariants; return the shape after each layer.

    Raises ArchitectureError naming the first offending layer index.
    The required stack shape is ``(conv+ pool)* flatten dense* classifier``
    with ReLU on every conv and hidden dense and no activation on the
    classifier.
    """
    shape = tuple(arch.input_shape)
    if len(shape) != 3 or any(int(d) <= 0 for d in shape):
        raise ArchitectureError(f"input_shape must be 3 positive dims, got {shape}")
    if arch.num_classes < 1:
        raise ArchitectureError(f"num_classes must be positive, got {arch.num_classes}")
    if not arch.layers:
        raise ArchitectureError("architecture has no layers")

    trace: list[tuple[int, ...]] = []
    seen_flatten = False
    convs_in_stage = 0
    for i, l in enumerate(arch.layers):
        if l.kind == "conv":
            if seen_flatten:
                raise ArchitectureError(f"layer {i}: conv after flatten")
            if l.activation != "relu":
                raise ArchitectureError(f"layer {i}: conv layers must use relu")
            if l.in_dim < 1 or l.out_dim < 1:
                raise ArchitectureError(f"layer {i}: conv dims must be positive")
            if l.in_dim != shape[0]:
                raise ArchitectureError(
                    f"layer {i}: conv expects {l.in_dim} input channels, gets {shape[0]}"
                )
            shape = (l.out_dim, shape[1], shape[2])
            convs_in_stage += 1
        elif l.kind == "pool":
            if seen_flatten:
                raise ArchitectureError(f"layer {i}: pool after flatten")
            if convs_in_stage == 0:
                raise ArchitectureError(f"layer {i}: pool without a preceding conv in its stage")
            h, w = shape[1] // POOL_WINDOW, shape[2] // POOL_WINDOW
            if h < 1 or w < 1:
                raise ArchitectureError(f"layer {i}: pool on {shape[1]}x{shape[2]} map is empty")
            shape = (shape[0], h, w)
            convs_in_stage = 0
        elif l.kind == "flatten":
            if seen_flatten:
                raise ArchitectureError(f"layer {i}: second flatten")
            if convs_in_stage != 0:
                raise ArchitectureError(f"layer {i}: flatten inside an unclosed conv stage")
            seen_flatten = True
            shape = (shape[0] * shape[1] * shape[2],)
        elif l.kind == "dense":
            if not seen_flatten:
                raise ArchitectureError(f"layer {i}: dense before flatten")
            if l.in_dim < 1 or l.out_dim < 1:
                raise ArchitectureError(f"layer {i}: dense dims must be positive")
            if l.in_dim != shape[0]:
                raise ArchitectureError(
                    f"layer {i}: dense expects {l.in_dim} input features, gets {shape[0]}"
                )
            is_last = i == len(arch.layers) - 1
            if is_last and l.activation is not None:
                raise ArchitectureError(f"layer {i}: classifier must have no activation")
            if not is_last and l.activation != "relu":
                raise ArchitectureError(f"layer {i}: hidden dense layers must use relu")
            shape = (l.out_dim,)
        else:
            raise ArchitectureError(f"layer {i}: unknown kind {l.kind!r}")
        trace.append(shape)

    if not seen_flatten:
        raise ArchitectureError("architecture has no flatten layer")
    last = arch.layers[-1]
    if last.kind != "dense":
        raise ArchitectureError("last layer must be the dense classifier")
    if last.out_dim != arch.num_classes:
        raise ArchitectureError(
            f"classifier outputs {last.out_dim} classes, expected {arch.num_classes}"
        )
    return trace


def shape_trace(arch: ArchitectureSpec) -> list[tuple[int, ...]]:
    """Shape after each layer for a batch-free input of ``input_shape``."""
    return validate_arch(arch)


def make_arch(
    input_shape: tuple[int, int, int],
    num_classes: int,
    stages: list[list[int]],
    head: list[int],
) -> ArchitectureSpec:
    """Build a validated architecture from stage/head width lists.

    ``stages`` gives the conv output channels per stage (each stage is
    closed by a pool); ``head`` gives hidden dense widths.  The flatten
    and classifier layers are added automatically.
    """
    layers: list[LayerSpec] = []
    channels = input_shape[0]
    h, w = input_shape[1], input_shape[2]
    for widths in stages:
        if not widths:
            raise ArchitectureError("each conv stage needs at least one conv")
        for width in widths:
            layers.append(conv(channels, width))
            channels = width
        layers.append(pool())
        h, w = h // POOL_WINDOW, w // POOL_WINDOW
    layers.append(flatten())
    features = channels * h * w
    for width in head:
        layers.append(dense(features, width, "relu"))
        features = width
    layers.append(dense(features, num_classes, None))
    arch = ArchitectureSpec(tuple(layers), tuple(input_shape), num_classes)
    validate_arch(arch)
    return arch


_WIDEN_KEY = re.compile(r"^s(\d+)\.l(\d+)$")


def _parse_dims(text: str, token: str) -> tuple[int, ...]:
    parts = text.split("x")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise ArchitectureError(f"bad dimension list in {token!r}") from None
    return dims

def _parse_width_list(body: str, prefix: str, token: str) -> list[int]:
    widths = []
    for item in body.split(","):
        item = item.strip()
        if not item.startswith(prefix):
            raise ArchitectureError(f"bad item {item!r} in {token!r}")
        try:
            widths.append(int(item[len(prefix):]))
        except ValueError:
            raise ArchitectureError(f"bad item {item!r} in {token!r}") from None
    return widths


def parse_arch(text: str) -> ArchitectureSpec:
    """Parse the canonical architecture string form.

    Required keys: ``in=CxHxW``, ``classes=N``, ``stages=[c8,c8|c16]``
    (``[]`` for none), ``head=[d32]``.  Optional ``widen={s1.l0:24}``
    overrides stage conv widths after parsing.  Raises ArchitectureError
    on any malformed token.
    """
    fields: dict[str, str] = {}
    for token in text.split():
        if "=" not in token:
            raise ArchitectureError(f"expected key=value, got {token!r}")
        key, value = token.split("=", 1)
        if key in fields:
            raise ArchitectureError(f"duplicate key {key!r}")
        fields[key] = value
    for required in ("in", "classes", "stages", "head"):
        if required not in fields:
            raise ArchitectureError(f"missing key {required!r}")
    unknown = set(fields) - {"in", "classes", "stages", "head", "widen"}
    if unknown:
        raise ArchitectureError(f"unknown key {sorted(unknown)[0]!r}")

    dims = _parse_dims(fields["in"], f"in={fields['in']}")
    if len(dims) != 3:
        raise ArchitectureError(f"in= needs CxHxW, got {fields['in']!r}")
    try:
        num_classes = int(fields["classes"])
    except ValueError:
        raise ArchitectureError(f"bad classes={fields['classes']!r}") from None

    stages_text = fields["stages"]
    if not (stages_text.startswith("[") and stages_text.endswith("]")):
        raise ArchitectureError(f"stages must be bracketed, got {stages_text!r}")
    body = stages_text[1:-1]
    stages: list[list[int]] = []
    if body:
        for stage_text in body.split("|"):
            stages.append(_parse_width_list(stage_text, "c", stages_text))

    head_text = fields["head"]
    if not (head_text.startswith("[") and head_text.endswith("]")):
        raise ArchitectureError(f"head must be bracketed, got {head_text!r}")
    head_body = head_text[1:-1]
    head = _parse_width_list(head_body, "d", head_text) if head_body else []

    if "widen" in fields:
        widen_text = fields["widen"]
        if not (widen_text.startswith("{") and widen_text.endswith("}")):
            raise ArchitectureError(f"widen must be braced, got {widen_text!r}")
        widen_body = widen_text[1:-1]
        if widen_body:
            for item in widen_body.split(","):
                if ":" not in item:
                    raise ArchitectureError(f"bad widen item {item!r}")
                key, value = item.split(":", 1)
                m = _WIDEN_KEY.match(key.strip())
                if not m:
                    raise ArchitectureError(f"bad widen key {key!r}")
                s, l = int(m.group(1)), int(m.group(2))
                try:
                    width = int(value)
                except ValueError:
                    raise ArchitectureError(f"bad widen width {value!r}") from None
                if s >= len(stages) or l >= len(stages[s]):
                    raise ArchitectureError(f"widen key {key!r} is out of range")
                stages[s][l] = width

    return make_arch(dims, num_classes, stages, head)


def format_arch(arch: ArchitectureSpec) -> str:
    """Render the canonical string form (inverse of parse_arch)."""
    c, h, w = arch.input_shape
    stages = "|".join(
        ",".join(f"c{width}" for width in stage) for stage in arch.stage_widths()
    )
    head = ",".join(f"d{width}" for width in arch.head_widths())
    return f"in={c}x{h}x{w} classes={arch.num_classes} stages=[{stages}] head=[{head}]"
