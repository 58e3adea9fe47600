"""Network assembly for the Light/Baseline/Heavy classifier variants.

Each variant is an ordered stack of conv blocks (Conv3x3 -> ReLU ->
Dropout 0.1 -> pool) ending in a global average pool, a 2-way linear layer,
and a softmax. Weight layout on disk is (out_ch, in_ch, kH, kW) row-major
float32, one blob per tensor, indexed by a checksummed text manifest.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from ..errors import ConfigError, ParseError, ShapeError, StateError
from . import layers as L


class Variant(str, Enum):
    LIGHT = "light"
    BASELINE = "baseline"
    HEAVY = "heavy"


class LayerKind(str, Enum):
    CONV3X3 = "conv3x3"
    RELU = "relu"
    DROPOUT = "dropout"
    MAXPOOL2X2 = "maxpool2x2"
    GLOBAL_AVG_POOL = "global_avg_pool"
    LINEAR = "linear"
    SOFTMAX = "softmax"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    in_ch: int = 0
    out_ch: int = 0
    p: float = 0.0


DROPOUT_P = 0.1

# Conv plan per variant: (in_ch, out_ch, pool) where pool is "max", "gap", or None.
_CONV_PLANS: dict[Variant, list[tuple[int, int, str | None]]] = {
    Variant.LIGHT: [(1, 16, "max"), (16, 32, "max"), (32, 64, "gap")],
    Variant.BASELINE: [(1, 32, "max"), (32, 64, "max"), (64, 128, "max"), (128, 256, "gap")],
    Variant.HEAVY: [
        (1, 64, None),
        (64, 64, "max"),
        (64, 128, None),
        (128, 128, "max"),
        (128, 256, None),
        (256, 256, "max"),
        (256, 512, "gap"),
    ],
}


def variant_specs(variant: Variant) -> list[LayerSpec]:
    specs: list[LayerSpec] = []
    plan = _CONV_PLANS[variant]
    for in_ch, out_ch, pool in plan:
        specs.append(LayerSpec(LayerKind.CONV3X3, in_ch=in_ch, out_ch=out_ch))
        specs.append(LayerSpec(LayerKind.RELU))
        specs.append(LayerSpec(LayerKind.DROPOUT, p=DROPOUT_P))
        if pool == "max":
            specs.append(LayerSpec(LayerKind.MAXPOOL2X2))
        elif pool == "gap":
            specs.append(LayerSpec(LayerKind.GLOBAL_AVG_POOL))
    head_in = plan[-1][1]
    specs.append(LayerSpec(LayerKind.LINEAR, in_ch=head_in, out_ch=2))
    specs.append(LayerSpec(LayerKind.SOFTMAX))
    return specs


class Network:
    """An ordered layer stack with explicit train/eval/mcd forward modes."""

    def __init__(self, variant: Variant, specs: list[LayerSpec], rng: np.random.Generator, dtype=np.float32):
        self.variant = variant
        self.specs = list(specs)
        self.dtype = dtype
        self.layers: list = []
        for spec in self.specs:
            if spec.kind is LayerKind.CONV3X3:
                self.layers.append(L.Conv3x3(spec.in_ch, spec.out_ch, rng=rng, dtype=dtype))
            elif spec.kind is LayerKind.RELU:
                self.layers.append(L.ReLU())
            elif spec.kind is LayerKind.DROPOUT:
                self.layers.append(L.Dropout(spec.p))
            elif spec.kind is LayerKind.MAXPOOL2X2:
                self.layers.append(L.MaxPool2x2())
            elif spec.kind is LayerKind.GLOBAL_AVG_POOL:
                self.layers.append(L.GlobalAvgPool())
            elif spec.kind is LayerKind.LINEAR:
                self.layers.append(L.Linear(spec.in_ch, spec.out_ch, rng=rng, dtype=dtype))
            elif spec.kind is LayerKind.SOFTMAX:
                self.layers.append(None)  # handled in forward
            else:  # pragma: no cover
                raise ConfigError(f"unknown layer kind {spec.kind}")
        self._probs: np.ndarray | None = None
        self._train_cached = False

    # -- parameters ----------------------------------------------------

    def parameters(self) -> list[L.Param]:
        out = []
        for i, layer in enumerate(self.layers):
            if layer is None:
                continue
            for p in layer.params():
                p.name = f"layer{i}.{p.name.split('.')[-1]}"
                out.append(p)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad[...] = 0

    def get_weights(self) -> list[np.ndarray]:
        return [p.value.copy() for p in self.parameters()]

    def set_weights(self, values: list[np.ndarray]) -> None:
        params = self.parameters()
        if len(values) != len(params):
            raise ShapeError(f"expected {len(params)} tensors, got {len(values)}")
        for p, v in zip(params, values):
            if p.value.shape != v.shape:
                raise ShapeError(f"{p.name}: shape {v.shape} != {p.value.shape}")
            p.value[...] = v.astype(p.value.dtype)

    # -- forward / backward ---------------------------------------------

    def forward(
        self, x: np.ndarray, mode: str = "eval", rng: np.random.Generator | None = None
    ) -> np.ndarray:
        """Run the stack; returns class probabilities of shape (N, 2).

        ``mode`` is "eval" (deterministic), "train" (dropout active, caches
        kept for backward), or "mcd" (dropout active, no caches).
        """
        if mode not in ("train", "eval", "mcd"):
            raise ConfigError(f"unknown forward mode {mode!r}")
        if x.ndim == 3:
            x = x[None, ...]
        if x.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got shape {x.shape}")
        train = mode == "train"
        dropout_active = mode in ("train", "mcd")
        if dropout_active and rng is None and any(isinstance(l, L.Dropout) and l.p > 0 for l in self.layers):
            raise ConfigError(f"mode {mode!r} requires an rng for dropout")
        h = np.ascontiguousarray(x, dtype=self.dtype)
        for layer in self.layers:
            if layer is None:
                # softmax computes in float64 for stability; keep the
                # network dtype so backward does not silently promote
                h = L.softmax(h).astype(self.dtype)
            elif isinstance(layer, L.Dropout):
                h = layer.forward(h, train, active=dropout_active, rng=rng)
            else:
                h = layer.forward(h, train)
        if train:
            self._probs = h
        # A non-train forward overwrites layer workspaces, so any previously
        # cached train pass can no longer back its backward.
        self._train_cached = train
        return h

    def backward(self, labels: np.ndarray) -> list[np.ndarray]:
        """Backpropagate mean cross-entropy; returns gradients in parameter order.

        The softmax + cross-entropy pair is fused: the gradient entering the
        final linear layer is (probs - onehot) / N.
        """
        if not self._train_cached or self._probs is None:
            raise StateError("backward requires a forward pass in train mode")
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        probs = self._probs
        if labels.shape[0] != probs.shape[0]:
            raise ShapeError("labels batch size mismatch")
        n, k = probs.shape
        onehot = np.zeros((n, k), dtype=probs.dtype)
        onehot[np.arange(n), labels] = 1
        grad = (probs - onehot) / n
        for layer in reversed(self.layers):
            if layer is None:
                continue  # fused with cross-entropy above
            grad = layer.backward(grad)
        self._train_cached = False
        return [p.grad.copy() for p in self.parameters()]


def build_model(variant: Variant | str, seed: int, dtype=np.float32) -> Network:
    """Instantiate a variant with He-uniform weights and zero biases."""
    variant = Variant(variant)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return Network(variant, variant_specs(variant), rng=rng, dtype=dtype)


# --- weights files ----------------------------------------------------------

_WEIGHTS_FORMAT = "murmurkit-weights"
_WEIGHTS_VERSION = 1


def save_network(net: Network, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [
        f"format\t{_WEIGHTS_FORMAT}\t{_WEIGHTS_VERSION}",
        f"variant\t{net.variant.value}",
        "dtype\tfloat32",
    ]
    for i, spec in enumerate(net.specs):
        lines.append(
            f"layer\t{i}\t{spec.kind.value}\t{spec.in_ch}\t{spec.out_ch}\t{spec.p}"
        )
    for p in net.parameters():
        blob = np.ascontiguousarray(p.value, dtype="<f4").tobytes()
        fname = f"{p.name}.bin"
        (out / fname).write_bytes(blob)
        shape = ",".join(str(d) for d in p.value.shape)
        lines.append(f"tensor\t{p.name}\t{shape}\t{fname}\t{zlib.crc32(blob):08x}")
    (out / "manifest").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_network(weights_dir: str | Path) -> Network:
    base = Path(weights_dir)
    manifest = base / "manifest"
    if not manifest.exists():
        raise ParseError(f"{weights_dir}: missing weights manifest")
    variant: Variant | None = None
    tensors: list[tuple[str, tuple[int, ...], str, int]] = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        fields = line.split("\t")
        if fields[0] == "variant":
            variant = Variant(fields[1])
        elif fields[0] == "tensor":
            name, shape_tok, fname, crc_tok = fields[1:5]
            shape = tuple(int(d) for d in shape_tok.split(","))
            tensors.append((name, shape, fname, int(crc_tok, 16)))
    if variant is None:
        raise ParseError(f"{weights_dir}: manifest lacks a variant entry")
    net = build_model(variant, seed=0)
    values = []
    for name, shape, fname, crc in tensors:
        blob = (base / fname).read_bytes()
        if zlib.crc32(blob) != crc:
            raise ParseError(f"{weights_dir}/{fname}: checksum mismatch")
        values.append(np.frombuffer(blob, dtype="<f4").reshape(shape))
    net.set_weights(values)
    return net
