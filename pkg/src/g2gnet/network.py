"""G2GNet model: patch embedder, masked hidden stack, dense classifier.

The embedder splits an image into a grid of patches and applies one shared
convolution to every patch.  With an ``(ph, pw)`` patch the kernel is
``(ph, pw - s)`` with horizontal stride ``s = pw // 2``, which leaves two
output positions per patch; 32 channels then give 64 features per patch
and a 1024-wide embedding for a 4x4 grid.

Mask ``i`` connects neuron layer ``i`` to layer ``i + 1`` (layer 0 is the
embedding).  Its grouping scheme is the one scheduled for layer ``i`` and is
applied to both sides of the mask, so under the mixer schedule mask 0 pairs
contiguous blocks, mask 1 pairs interleaved classes, and so on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import rng
from .errors import ConfigurationError, TrainingDiverged
from .tensor_core import (
    DTYPE,
    AdamState,
    adam_step,
    kaiming_uniform,
    load_checkpoint,
    masked_linear_backward,
    masked_linear_forward,
    relu_backward,
    relu_forward,
    save_checkpoint,
    softmax_cross_entropy,
)
from .topology import (
    ConnectivityMask,
    GroupAssignment,
    build_er_mask,
    build_g2g_mask,
    expected_density,
    full_mask,
    make_partition,
    mask_stats,
    partition_random,
)

MODEL_KINDS = ("g2g", "fc_v1", "fc_v2", "er")

# init stream keys; hidden layers use their index
_EMBED_KEY = 100
_CLASSIFIER_KEY = 101


@dataclass
class ModelConfig:
    image_shape: tuple = (3, 32, 32)
    num_classes: int = 10
    kind: str = "g2g"
    hidden_width: int = 1024
    depth: int = 3
    groups: int = 8
    p: float = 1.0
    p_prime: float = 0.15
    grouping: str = "mixer"
    patch_grid: tuple = (4, 4)
    conv_channels: int = 32
    topology_seed: int = 0
    init_seed: int = 0
    learning_rate: float = 1e-3
    fc_v1_budget: int | None = None

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.patch_grid = tuple(int(v) for v in self.patch_grid)

    def validate(self) -> None:
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.grouping not in ("index", "random", "mixer"):
            raise ConfigurationError(f"unknown grouping {self.grouping!r}")
        for name in ("p", "p_prime"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.p_prime > self.p:
            raise ConfigurationError("p_prime must not exceed p")
        if self.depth < 1 or self.hidden_width < 1 or self.groups < 1:
            raise ConfigurationError("depth, hidden_width and groups must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("need at least two classes")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if len(self.image_shape) != 3 or len(self.patch_grid) != 2:
            raise ConfigurationError("image_shape is (C, H, W) and patch_grid is (rows, cols)")
        _, h, w = self.image_shape
        gr, gc = self.patch_grid
        if h % gr or w % gc or w // gc < 2:
            raise ConfigurationError(f"image {h}x{w} does not split into a {gr}x{gc} grid of patches at least 2 wide")
        if self.kind == "g2g":
            embed = gr * gc * 2 * self.conv_channels
            if self.hidden_width % self.groups or embed % self.groups:
                raise ConfigurationError(
                    f"groups={self.groups} must divide hidden_width={self.hidden_width} and the embedding width {embed}"
                )


class PatchEmbedder:
    """Shared convolution applied independently to each patch of a grid."""

    def __init__(self, image_shape, patch_grid=(4, 4), out_channels=32, gen=None, dtype=DTYPE):
        c, h, w = image_shape
        gr, gc = patch_grid
        if h % gr or w % gc:
            raise ConfigurationError(f"image {h}x{w} is not divisible by the {gr}x{gc} patch grid")
        ph, pw = h // gr, w // gc
        if pw < 2:
            raise ConfigurationError("patches must be at least two pixels wide")
        self.image_shape = (c, h, w)
        self.patch_grid = (gr, gc)
        self.out_channels = out_channels
        self.stride = pw // 2
        self.kernel = (ph, pw - self.stride)
        self.positions = (pw - self.kernel[1]) // self.stride + 1
        kh, kw = self.kernel

        # flat gather index of every (patch, position) window into a C*H*W image
        ch, ii, jj = np.meshgrid(np.arange(c), np.arange(kh), np.arange(kw), indexing="ij")
        window = (ch * h * w + ii * w + jj).ravel()
        starts = []
        for r in range(gr):
            for col in range(gc):
                for q in range(self.positions):
                    starts.append(r * ph * w + col * pw + q * self.stride)
        self.index = np.asarray(starts)[:, None] + window[None, :]

        fan_in = c * kh * kw
        if gen is None:
            self.weight = np.zeros((fan_in, out_channels), dtype=dtype)
        else:
            self.weight = kaiming_uniform(gen, (fan_in, out_channels), gain=1.0, dtype=dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)

    @property
    def patch_count(self) -> int:
        return self.patch_grid[0] * self.patch_grid[1]

    @property
    def features_per_patch(self) -> int:
        return self.positions * self.out_channels

    @property
    def out_features(self) -> int:
        return self.patch_count * self.features_per_patch

    def columns(self, images):
        if images.shape[1:] != self.image_shape:
            raise ConfigurationError(f"expected images of shape {self.image_shape}, got {images.shape[1:]}")
        flat = images.reshape(images.shape[0], -1)
        return flat[:, self.index]

    def forward(self, images):
        """Return ``(embedding, cols)``; embedding is ``(B, out_features)`` in patch-major order."""
        cols = self.columns(images)
        y = cols @ self.weight + self.bias
        return y.reshape(images.shape[0], -1), cols

    def backward(self, cols, upstream, need_input_grad=False):
        b, windows, k = cols.shape
        up = upstream.reshape(b * windows, self.out_channels)
        grad_w = cols.reshape(b * windows, k).T @ up
        grad_b = up.sum(axis=0)
        grad_in = None
        if need_input_grad:
            g_cols = (up @ self.weight.T).reshape(b, windows, k)
            grad_in = np.zeros((b, int(np.prod(self.image_shape))), dtype=upstream.dtype)
            for n in range(b):
                np.add.at(grad_in[n], self.index, g_cols[n])
            grad_in = grad_in.reshape((b,) + self.image_shape)
        return grad_w, grad_b, grad_in

    def embed(self, image):
        """Embed a single ``(C, H, W)`` image."""
        return self.forward(image[None])[0][0]


@dataclass
class SparseLinearLayer:
    weight: np.ndarray
    bias: np.ndarray
    mask: ConnectivityMask | None = None
    adam_w: AdamState | None = None
    adam_b: AdamState | None = None

    def __post_init__(self):
        if self.adam_w is None:
            self.adam_w = AdamState.like(self.weight)
        if self.adam_b is None:
            self.adam_b = AdamState.like(self.bias)

    @property
    def bits(self):
        return self.mask.bits if self.mask is not None else np.ones(self.weight.shape, dtype=bool)

    def forward(self, x):
        if self.mask is None:
            return x @ self.weight + self.bias
        return masked_linear_forward(x, self.weight, self.mask, self.bias)

    def backward(self, x, upstream):
        if self.mask is None:
            return upstream @ self.weight.T, x.T @ upstream, upstream.sum(axis=0)
        return masked_linear_backward(x, self.weight, self.mask, upstream)

    def step(self, grad_w, grad_b):
        adam_step(self.weight, grad_w, self.adam_w, self.mask)
        adam_step(self.bias, grad_b, self.adam_b)

    def set_learning_rate(self, lr):
        self.adam_w.learning_rate = lr
        self.adam_b.learning_rate = lr


def fc_v1_width(budget: float, in_width: int, depth: int = 3) -> int:
    """Uniform hidden width ``w`` with ``in_width*w + (depth-1)*w**2 == budget`` (rounded)."""
    if depth == 1:
        return max(1, round(budget / in_width))
    a = depth - 1
    w = (-in_width + math.sqrt(in_width**2 + 4 * a * budget)) / (2 * a)
    return max(1, int(round(w)))


def _mask_schedule(cfg: ModelConfig, widths):
    """Source/destination groupings for each hidden mask."""
    out = []
    for i in range(cfg.depth):
        n_in, n_out = widths[i], widths[i + 1]
        if cfg.grouping == "random":
            src = partition_random(n_in, cfg.groups, cfg.topology_seed, 2 * i)
            dst = partition_random(n_out, cfg.groups, cfg.topology_seed, 2 * i + 1)
        else:
            src = make_partition(cfg.grouping, n_in, cfg.groups, i)
            scheme = src.strategy if cfg.grouping != "mixer" else ("index" if i % 2 == 0 else "interleaved")
            dst = make_partition(scheme, n_out, cfg.groups, i)
            dst = GroupAssignment(dst.layer_size, dst.group_count, dst.assignment, src.strategy)
        out.append((src, dst))
    return out


class G2GModel:
    def __init__(self, config: ModelConfig, embedder: PatchEmbedder, hidden, classifier: SparseLinearLayer):
        self.config = config
        self.embedder = embedder
        self.hidden = list(hidden)
        self.classifier = classifier
        self.embed_adam_w = AdamState.like(embedder.weight, config.learning_rate)
        self.embed_adam_b = AdamState.like(embedder.bias, config.learning_rate)
        self._cache = None

    @property
    def kind(self):
        return self.config.kind

    @property
    def masks(self):
        return [layer.mask for layer in self.hidden]

    @property
    def widths(self):
        return [self.embedder.out_features] + [layer.weight.shape[1] for layer in self.hidden]

    def masked_param_count(self) -> int:
        return sum(int(np.count_nonzero(layer.bits)) for layer in self.hidden)

    def param_counts(self) -> dict:
        hidden_bias = sum(layer.bias.size for layer in self.hidden)
        counts = {
            "masked_weights": self.masked_param_count(),
            "hidden_bias": hidden_bias,
            "embedder": self.embedder.weight.size + self.embedder.bias.size,
            "classifier": self.classifier.weight.size + self.classifier.bias.size,
        }
        counts["total"] = sum(counts.values())
        return counts

    def set_learning_rate(self, lr):
        self.config.learning_rate = lr
        for layer in self.hidden + [self.classifier]:
            layer.set_learning_rate(lr)
        self.embed_adam_w.learning_rate = lr
        self.embed_adam_b.learning_rate = lr

    def forward(self, images, keep_cache=False):
        """Return ``(logits, snapshots)``.

        ``snapshots`` holds the embedding followed by each hidden layer's
        post-ReLU output; consecutive pairs feed the Hebbian scores.
        """
        e, cols = self.embedder.forward(images)
        h = e
        snaps = [e]
        pre = []
        for layer in self.hidden:
            z = layer.forward(h)
            h = relu_forward(z)
            pre.append(z)
            snaps.append(h)
        logits = self.classifier.forward(h)
        if keep_cache:
            self._cache = (cols, pre, snaps)
        return logits, snaps

    def backward(self, grad_logits):
        """Gradients for every parameter tensor, from the last cached forward."""
        cols, pre, snaps = self._cache
        grads = {}
        gx, gw, gb = self.classifier.backward(snaps[-1], grad_logits)
        grads["classifier"] = (gw, gb)
        for i in range(len(self.hidden) - 1, -1, -1):
            gz = relu_backward(pre[i], gx)
            gx, gw, gb = self.hidden[i].backward(snaps[i], gz)
            grads[i] = (gw, gb)
        ew, eb, _ = self.embedder.backward(cols, gx)
        grads["embedder"] = (ew, eb)
        return grads

    def apply_gradients(self, grads):
        self.classifier.step(*grads["classifier"])
        for i, layer in enumerate(self.hidden):
            layer.step(*grads[i])
        adam_step(self.embedder.weight, grads["embedder"][0], self.embed_adam_w)
        adam_step(self.embedder.bias, grads["embedder"][1], self.embed_adam_b)

    def train_step(self, images, labels, iteration=None):
        """One forward/backward/Adam update; returns ``(loss, batch_accuracy, snapshots)``."""
        logits, snaps = self.forward(images, keep_cache=True)
        loss, grad = softmax_cross_entropy(logits, labels)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at iteration {iteration}", iteration, loss)
        grads = self.backward(grad)
        self.apply_gradients(grads)
        self._cache = None
        acc = float(np.mean(np.argmax(logits, axis=1) == labels))
        return loss, acc, snaps

    def predict(self, images, batch_size=1000):
        out = []
        for s in range(0, len(images), batch_size):
            logits, _ = self.forward(images[s : s + batch_size])
            out.append(np.argmax(logits, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def evaluate(self, images, labels, batch_size=1000) -> float:
        if len(labels) == 0:
            return float("nan")
        return float(np.mean(self.predict(images, batch_size) == labels))

    def describe(self) -> dict:
        layers = []
        for i, layer in enumerate(self.hidden):
            entry = {
                "index": i,
                "shape": list(layer.weight.shape),
                "active": int(np.count_nonzero(layer.bits)),
                "density": float(np.count_nonzero(layer.bits) / layer.bits.size),
            }
            if layer.mask is not None:
                prov = layer.mask.provenance
                entry["mask_kind"] = prov.get("kind")
                if "src" in prov:
                    entry["grouping"] = {"src": prov["src"]["strategy"], "dst": prov["dst"]["strategy"]}
            layers.append(entry)
        cfg = asdict(self.config)
        return {
            "kind": self.kind,
            "config": cfg,
            "embedder": {
                "patch_grid": list(self.embedder.patch_grid),
                "kernel": list(self.embedder.kernel),
                "stride": self.embedder.stride,
                "out_channels": self.embedder.out_channels,
                "features_per_patch": self.embedder.features_per_patch,
                "out_features": self.embedder.out_features,
            },
            "hidden_layers": layers,
            "classifier": list(self.classifier.weight.shape),
            "parameters": self.param_counts(),
        }

    def layer_stats(self):
        return [mask_stats(layer.mask) for layer in self.hidden]

    # checkpoint support -------------------------------------------------

    def state_arrays(self) -> dict:
        arr = {
            "embed.weight": self.embedder.weight,
            "embed.bias": self.embedder.bias,
            "embed.adam_w.m": self.embed_adam_w.first_moment,
            "embed.adam_w.v": self.embed_adam_w.second_moment,
            "embed.adam_b.m": self.embed_adam_b.first_moment,
            "embed.adam_b.v": self.embed_adam_b.second_moment,
        }
        for name, layer in [(f"hidden.{i}", l) for i, l in enumerate(self.hidden)] + [("classifier", self.classifier)]:
            arr[f"{name}.weight"] = layer.weight
            arr[f"{name}.bias"] = layer.bias
            arr[f"{name}.adam_w.m"] = layer.adam_w.first_moment
            arr[f"{name}.adam_w.v"] = layer.adam_w.second_moment
            arr[f"{name}.adam_b.m"] = layer.adam_b.first_moment
            arr[f"{name}.adam_b.v"] = layer.adam_b.second_moment
            if layer.mask is not None:
                arr[f"{name}.mask"] = np.packbits(layer.mask.bits, axis=None)
        return arr

    def state_meta(self) -> dict:
        steps = {"embed.adam_w": self.embed_adam_w.step_count, "embed.adam_b": self.embed_adam_b.step_count}
        provs = {}
        for name, layer in [(f"hidden.{i}", l) for i, l in enumerate(self.hidden)] + [("classifier", self.classifier)]:
            steps[f"{name}.adam_w"] = layer.adam_w.step_count
            steps[f"{name}.adam_b"] = layer.adam_b.step_count
            if layer.mask is not None:
                provs[name] = layer.mask.provenance
        return {"model_config": asdict(self.config), "adam_steps": steps, "mask_provenance": provs}

    def save(self, path, extra_meta=None):
        meta = self.state_meta()
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def from_state(cls, arrays: dict, meta: dict) -> "G2GModel":
        cfg = ModelConfig(**meta["model_config"])
        embedder = PatchEmbedder(cfg.image_shape, cfg.patch_grid, cfg.conv_channels)
        embedder.weight = arrays["embed.weight"].copy()
        embedder.bias = arrays["embed.bias"].copy()
        steps = meta["adam_steps"]
        provs = meta["mask_provenance"]

        def layer(name):
            w = arrays[f"{name}.weight"].copy()
            mask = None
            if f"{name}.mask" in arrays:
                bits = np.unpackbits(arrays[f"{name}.mask"], count=w.size).reshape(w.shape).astype(bool)
                mask = ConnectivityMask(bits, provs.get(name, {}))
            lyr = SparseLinearLayer(w, arrays[f"{name}.bias"].copy(), mask)
            for slot, st in (("adam_w", lyr.adam_w), ("adam_b", lyr.adam_b)):
                st.first_moment = arrays[f"{name}.{slot}.m"].copy()
                st.second_moment = arrays[f"{name}.{slot}.v"].copy()
                st.step_count = int(steps[f"{name}.{slot}"])
            return lyr

        hidden = [layer(f"hidden.{i}") for i in range(cfg.depth)]
        model = cls(cfg, embedder, hidden, layer("classifier"))
        for slot, st in (("embed.adam_w", model.embed_adam_w), ("embed.adam_b", model.embed_adam_b)):
            st.first_moment = arrays[f"{slot}.m"].copy()
            st.second_moment = arrays[f"{slot}.v"].copy()
            st.step_count = int(steps[slot])
        model.set_learning_rate(cfg.learning_rate)
        return model

    @classmethod
    def load(cls, path):
        arrays, meta = load_checkpoint(path)
        return cls.from_state(arrays, meta), meta


def _build(cfg: ModelConfig, masks_for) -> G2GModel:
    cfg.validate()
    embedder = PatchEmbedder(
        cfg.image_shape, cfg.patch_grid, cfg.conv_channels, gen=rng.stream(cfg.init_seed, rng.INIT, _EMBED_KEY)
    )
    widths = masks_for.widths(embedder.out_features)
    masks = masks_for.masks(widths)
    hidden = []
    for i, mask in enumerate(masks):
        gen = rng.stream(cfg.init_seed, rng.INIT, i)
        w = kaiming_uniform(gen, (widths[i], widths[i + 1]), mask=mask.bits)
        hidden.append(SparseLinearLayer(w, np.zeros(widths[i + 1], dtype=DTYPE), mask))
    gen = rng.stream(cfg.init_seed, rng.INIT, _CLASSIFIER_KEY)
    cw = kaiming_uniform(gen, (widths[-1], cfg.num_classes), gain=1 / math.sqrt(3.0))
    classifier = SparseLinearLayer(cw, np.zeros(cfg.num_classes, dtype=DTYPE))
    model = G2GModel(cfg, embedder, hidden, classifier)
    model.set_learning_rate(cfg.learning_rate)
    return model


class _G2GMasks:
    def __init__(self, cfg):
        self.cfg = cfg

    def widths(self, embed_width):
        return [embed_width] + [self.cfg.hidden_width] * self.cfg.depth

    def masks(self, widths):
        cfg = self.cfg
        return [
            build_g2g_mask(src, dst, cfg.p, cfg.p_prime, cfg.topology_seed, i)
            for i, (src, dst) in enumerate(_mask_schedule(cfg, widths))
        ]


class _DenseMasks:
    def __init__(self, cfg, width):
        self.cfg, self.width = cfg, width

    def widths(self, embed_width):
        return [embed_width] + [self.width] * self.cfg.depth

    def masks(self, widths):
        return [full_mask(widths[i], widths[i + 1]) for i in range(self.cfg.depth)]


class _ERMasks(_G2GMasks):
    def masks(self, widths):
        cfg = self.cfg
        d = expected_density(cfg.p, cfg.p_prime, cfg.groups)
        return [build_er_mask(widths[i], widths[i + 1], d, cfg.topology_seed, i) for i in range(cfg.depth)]


def build_g2gnet(config: ModelConfig) -> G2GModel:
    cfg = replace(config, kind="g2g")
    return _build(cfg, _G2GMasks(cfg))


def matched_budget(config: ModelConfig) -> float:
    """Expected active masked weights of the G2GNet this config describes."""
    embed = PatchEmbedder(config.image_shape, config.patch_grid, config.conv_channels).out_features
    n = config.hidden_width
    d = expected_density(config.p, config.p_prime, config.groups)
    return d * (embed * n + (config.depth - 1) * n * n)


def build_baseline(kind: str, config: ModelConfig) -> G2GModel:
    if kind not in ("fc_v1", "fc_v2", "er"):
        raise ConfigurationError(f"unknown baseline {kind!r}; expected fc_v1, fc_v2 or er")
    cfg = replace(config, kind=kind)
    if kind == "fc_v2":
        return _build(cfg, _DenseMasks(cfg, cfg.hidden_width))
    if kind == "er":
        return _build(cfg, _ERMasks(cfg))
    budget = cfg.fc_v1_budget if cfg.fc_v1_budget is not None else matched_budget(cfg)
    embed = PatchEmbedder(cfg.image_shape, cfg.patch_grid, cfg.conv_channels).out_features
    return _build(cfg, _DenseMasks(cfg, fc_v1_width(budget, embed, cfg.depth)))


def build_model(config: ModelConfig) -> G2GModel:
    if config.kind == "g2g":
        return build_g2gnet(config)
    return build_baseline(config.kind, config)
