"""The Dronet-style model family with channel scaling and by-pass removal."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction

from .errors import ModelError
from .graph import ADD, CONV, FC, FLATTEN, INPUT, MAXPOOL, RELU, SIGMOID, LayerSpec, Model, TensorShape

GAMMAS = (Fraction(1, 8), Fraction(1, 4), Fraction(1, 2), Fraction(1))
N_BLOCKS = 3
# Channel multiplier (relative to base_channels) of each ResBlock's output.
BLOCK_WIDTHS = (1, 2, 4)


def as_gamma(value) -> Fraction:
    """Parse a width multiplier given as a float, string or Fraction."""
    try:
        frac = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(1024)
    except (TypeError, ValueError, ZeroDivisionError):
        raise ModelError(f"cannot interpret gamma {value!r}") from None
    if frac <= 0:
        raise ModelError(f"gamma must be positive, got {value!r}")
    return frac


@dataclass(frozen=True)
class FamilyConfig:
    gamma: Fraction = Fraction(1)
    with_bypass: bool = True
    input_shape: TensorShape = field(default_factory=lambda: TensorShape(1, 200, 200))
    base_channels: int = 32

    def __post_init__(self):
        gamma = as_gamma(self.gamma)
        object.__setattr__(self, "gamma", gamma)
        if gamma not in GAMMAS:
            raise ModelError(f"gamma not in family: {float(gamma)} (allowed {[float(g) for g in GAMMAS]})")
        if self.base_channels < 1:
            raise ModelError("base_channels must be positive")
        for width in BLOCK_WIDTHS:
            if (gamma * width * self.base_channels).denominator != 1:
                raise ModelError(
                    f"gamma*{width}*base_channels = {float(gamma * width * self.base_channels)} is not an integer"
                )

    def channels(self, width: int = 1) -> int:
        return int(self.gamma * width * self.base_channels)


def build_dronet(cfg: FamilyConfig) -> Model:
    """Construct the ResNet-8 style family member described by ``cfg``.

    The stem is a 5x5/s2 conv + ReLU + 2x2 max-pool, followed by three
    ResBlocks (3x3/s2 then 3x3/s1 convs, optional 1x1/s2 by-pass joined by
    Add) and two single-unit heads on the flattened map.  ReLU ids follow
    the act0..act6 / byp1..byp3 naming used in sparsity reports.
    """
    layers = [
        LayerSpec("input", INPUT),
        LayerSpec("conv0", CONV, ("input",), kernel=5, stride=2, padding=2, out_channels=cfg.channels()),
        LayerSpec("act0", RELU, ("conv0",)),
        LayerSpec("pool0", MAXPOOL, ("act0",), kernel=2, stride=2),
    ]
    prev = "pool0"
    for n, width in enumerate(BLOCK_WIDTHS, start=1):
        rb, out = f"rb{n}", cfg.channels(width)
        a, b = f"act{2 * n - 1}", f"act{2 * n}"
        layers += [
            LayerSpec(f"{rb}_conv1", CONV, (prev,), kernel=3, stride=2, padding=1, out_channels=out, group=rb),
            LayerSpec(a, RELU, (f"{rb}_conv1",), group=rb),
            LayerSpec(f"{rb}_conv2", CONV, (a,), kernel=3, stride=1, padding=1, out_channels=out, group=rb),
            LayerSpec(b, RELU, (f"{rb}_conv2",), group=rb),
        ]
        if cfg.with_bypass:
            layers += [
                LayerSpec(f"byp{n}", CONV, (prev,), kernel=1, stride=2, padding=0, out_channels=out, group=rb),
                LayerSpec(f"{rb}_add", ADD, (b, f"byp{n}"), group=rb),
            ]
            prev = f"{rb}_add"
        else:
            prev = b
    layers += [
        LayerSpec("flatten", FLATTEN, (prev,)),
        LayerSpec("fc_steer", FC, ("flatten",), out_channels=1),
        LayerSpec("fc_coll", FC, ("flatten",), out_channels=1),
        LayerSpec("sigmoid", SIGMOID, ("fc_coll",)),
    ]
    model = Model(tuple(layers), cfg.input_shape, cfg)
    model.inferred_shapes  # fail fast on inputs too small for three stride-2 blocks
    return model


def scale_channels(model: Model, gamma) -> Model:
    """Set every conv width to ``gamma`` times its gamma=1 baseline width.

    For family members the baseline is recovered from the configured gamma,
    so scaling is absolute rather than compositional.  Arbitrary graphs are
    treated as their own baseline.
    """
    gamma = as_gamma(gamma)
    cfg = model.family_config
    current = cfg.gamma if isinstance(cfg, FamilyConfig) else Fraction(1)
    new_cfg = replace(cfg, gamma=gamma) if isinstance(cfg, FamilyConfig) else cfg
    layers = []
    for layer in model.layers:
        if layer.kind == CONV:
            scaled = Fraction(layer.out_channels) / current * gamma
            if scaled.denominator != 1 or scaled < 1:
                raise ModelError(
                    f"layer {layer.id!r}: {layer.out_channels} channels scale to non-integral {float(scaled)}"
                )
            layer = replace(layer, out_channels=int(scaled))
        layers.append(layer)
    scaled_model = model.with_layers(layers, family_config=new_cfg)
    scaled_model.inferred_shapes
    return scaled_model


def find_bypasses(model: Model) -> list[tuple[str, str, str]]:
    """Return ``(add_id, main_input, bypass_conv)`` for every removable skip.

    A by-pass is a Conv2d feeding an Add as its only consumer, whose own
    input also feeds the Add's other branch.
    """
    found = []
    for layer in model.layers:
        if layer.kind != ADD:
            continue
        for side in (1, 0):
            byp = model[layer.inputs[side]]
            main = layer.inputs[1 - side]
            if byp.kind == CONV and model.consumers[byp.id] == [layer.id] and main != byp.id:
                found.append((layer.id, main, byp.id))
                break
    return found


def remove_bypass(model: Model) -> Model:
    """Delete every by-pass conv and its Add, wiring the main branch through."""
    bypasses = find_bypasses(model)
    if not bypasses:
        return model
    dropped = set()
    rewire = {}
    for add_id, main, byp in bypasses:
        dropped.update((add_id, byp))
        rewire[add_id] = main
    layers = []
    for layer in model.layers:
        if layer.id in dropped:
            continue
        inputs = tuple(rewire.get(src, src) for src in layer.inputs)
        layers.append(replace(layer, inputs=inputs))
    cfg = model.family_config
    if isinstance(cfg, FamilyConfig):
        cfg = replace(cfg, with_bypass=False)
    pruned = model.with_layers(layers, family_config=cfg)
    pruned.inferred_shapes
    return pruned


def family(gamma=1, bypass=True, **kwargs) -> Model:
    """Shorthand for ``build_dronet(FamilyConfig(...))``."""
    return build_dronet(FamilyConfig(gamma=as_gamma(gamma), with_bypass=bypass, **kwargs))
