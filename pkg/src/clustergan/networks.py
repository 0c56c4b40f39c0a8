"""MLP generator / encoder / discriminator stacks and the linear mixture generator."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .latent import LatentCode, LatentSpec, derive_seed, make_rng

INIT_SCHEME = "uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); bias 0; batchnorm gamma 1 beta 0"

# layers whose input-gradient is a product of constant masks and weight matrices
DOUBLE_BACKPROP_SAFE = {"linear", "leaky_relu", "relu"}


@dataclass(frozen=True)
class Layer:
    kind: str  # linear | leaky_relu | relu | sigmoid | batchnorm | softmax_tail
    size: int = 0  # linear width, batchnorm width, or softmax tail length
    alpha: float = 0.2


class MlpNetwork:
    """An ordered list of layers with a named parameter set."""

    def __init__(self, input_dim: int, layers: list[Layer], seed: int = 0, name: str = "net",
                 double_backprop: bool = False):
        self.input_dim = input_dim
        self.layers = list(layers)
        self.name = name
        self.double_backprop = double_backprop
        if double_backprop:
            bad = sorted({l.kind for l in self.layers} - DOUBLE_BACKPROP_SAFE)
            if bad:
                raise ValueError(f"{name}: layers {bad} do not support input-gradient penalties")
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = make_rng(seed)
        width = input_dim
        for i, layer in enumerate(self.layers):
            if layer.kind == "linear":
                bound = 1.0 / np.sqrt(width)
                self.params[f"{i}.weight"] = ad.parameter(
                    rng.uniform(-bound, bound, size=(width, layer.size)), f"{name}.{i}.weight")
                self.params[f"{i}.bias"] = ad.parameter(np.zeros((1, layer.size)), f"{name}.{i}.bias")
                width = layer.size
            elif layer.kind == "batchnorm":
                if layer.size != width:
                    raise ValueError(f"{name}: batchnorm width {layer.size} != incoming {width}")
                self.params[f"{i}.gamma"] = ad.parameter(np.ones((1, width)), f"{name}.{i}.gamma")
                self.params[f"{i}.beta"] = ad.parameter(np.zeros((1, width)), f"{name}.{i}.beta")
                self.buffers[f"{i}.running_mean"] = np.zeros((1, width))
                self.buffers[f"{i}.running_var"] = np.ones((1, width))
            elif layer.kind == "softmax_tail":
                if not 2 <= layer.size <= width:
                    raise ValueError(f"{name}: softmax tail {layer.size} does not fit width {width}")
            elif layer.kind not in ("leaky_relu", "relu", "sigmoid"):
                raise ValueError(f"{name}: unknown layer kind {layer.kind!r}")
        self.output_dim = width

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    @property
    def softmax_tail(self) -> int:
        return self.layers[-1].size if self.layers and self.layers[-1].kind == "softmax_tail" else 0

    def _param(self, key: str, frozen: bool) -> Tensor:
        p = self.params[key]
        return Tensor(p.data) if frozen else p

    def forward(self, x, training: bool = True, frozen: bool = False, logits: bool = False,
                upto: int | None = None) -> Tensor:
        """Run layers ``[0, upto)``. ``logits`` skips the softmax tail; ``frozen`` treats
        parameters as constants so no gradient reaches them."""
        h = ad.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValueError(f"{self.name}: expected input (n, {self.input_dim}), got {h.shape}")
        stop = len(self.layers) if upto is None else upto
        for i, layer in enumerate(self.layers[:stop]):
            kind = layer.kind
            if kind == "linear":
                h = ad.add(ad.matmul(h, self._param(f"{i}.weight", frozen)), self._param(f"{i}.bias", frozen))
            elif kind == "leaky_relu":
                h = ad.leaky_relu(h, layer.alpha)
            elif kind == "relu":
                h = ad.relu(h)
            elif kind == "sigmoid":
                h = ad.sigmoid(h)
            elif kind == "batchnorm":
                h = self._batchnorm(i, h, training, frozen)
            elif kind == "softmax_tail" and not logits:
                k = layer.size
                head = h.shape[1] - k
                parts = [ad.softmax_rows(h[:, head:])]
                if head:
                    parts.insert(0, h[:, :head])
                h = ad.concat(parts, axis=1) if len(parts) > 1 else parts[0]
        return h

    def _batchnorm(self, i: int, h: Tensor, training: bool, frozen: bool) -> Tensor:
        gamma, beta = self._param(f"{i}.gamma", frozen), self._param(f"{i}.beta", frozen)
        if training and h.shape[0] > 1:
            out = ad.batchnorm(h, gamma, beta)
            momentum = 0.1
            self.buffers[f"{i}.running_mean"] = ((1 - momentum) * self.buffers[f"{i}.running_mean"]
                                                 + momentum * h.data.mean(axis=0, keepdims=True))
            self.buffers[f"{i}.running_var"] = ((1 - momentum) * self.buffers[f"{i}.running_var"]
                                                + momentum * h.data.var(axis=0, keepdims=True))
            return out
        mu = self.buffers[f"{i}.running_mean"]
        sd = np.sqrt(self.buffers[f"{i}.running_var"] + 1e-5)
        return ad.add(ad.mul(ad.div(ad.sub(h, mu), sd), gamma), beta)

    def __call__(self, x, **kwargs) -> Tensor:
        return self.forward(x, **kwargs)

    def predict(self, x: np.ndarray, batch: int = 4096) -> np.ndarray:
        """Evaluation-mode forward on a plain array, in chunks."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = [self.forward(x[i:i + batch], training=False, frozen=True).data
               for i in range(0, x.shape[0], batch)]
        return np.vstack(out) if out else np.zeros((0, self.output_dim))

    def features(self, x: np.ndarray) -> np.ndarray:
        """Activations feeding the final linear layer (the ``phi`` features)."""
        last_linear = max(i for i, l in enumerate(self.layers) if l.kind == "linear")
        return self.forward(np.atleast_2d(x), training=False, frozen=True, upto=last_linear).data

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param/{k}": v.data.copy() for k, v in self.params.items()}
        state.update({f"buffer/{k}": v.copy() for k, v in self.buffers.items()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for key, value in state.items():
            kind, name = key.split("/", 1)
            target = self.params[name].data if kind == "param" else self.buffers[name]
            if target.shape != value.shape:
                raise ValueError(f"{self.name}: {name} has shape {target.shape}, checkpoint {value.shape}")
            if kind == "param":
                self.params[name].data = np.array(value, dtype=np.float64)
            else:
                self.buffers[name] = np.array(value, dtype=np.float64)

    def architecture(self) -> dict:
        return {"type": "mlp", "name": self.name, "input_dim": self.input_dim,
                "double_backprop": self.double_backprop, "init": INIT_SCHEME,
                "layers": [asdict(l) for l in self.layers]}


class LinearGenerator:
    """G(z_n, z_c) = z_n + A z_c with A holding one mean per column."""

    def __init__(self, means: np.ndarray, name: str = "linear_G"):
        means = np.asarray(means, dtype=float)
        self.name = name
        self.params = {"A": ad.parameter(means.copy(), f"{name}.A")}
        self.d, self.k = means.shape
        self.input_dim = self.d + self.k
        self.output_dim = self.d
        self.buffers: dict[str, np.ndarray] = {}

    @property
    def A(self) -> Tensor:
        return self.params["A"]

    def parameters(self) -> list[Tensor]:
        return [self.A]

    def zero_grad(self) -> None:
        self.A.grad = None

    def forward(self, z, training: bool = True, frozen: bool = False, **_) -> Tensor:
        z = ad.as_tensor(z)
        if z.data.ndim != 2 or z.shape[1] != self.input_dim:
            raise ValueError(f"{self.name}: expected input (n, {self.input_dim}), got {z.shape}")
        a = Tensor(self.A.data) if frozen else self.A
        return ad.add(z[:, :self.d], ad.matmul(z[:, self.d:], ad.transpose(a)))

    __call__ = forward

    def predict(self, z: np.ndarray, batch: int = 0) -> np.ndarray:
        z = np.atleast_2d(z)
        return z[:, :self.d] + z[:, self.d:] @ self.A.data.T

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"param/A": self.A.data.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.A.data = np.array(state["param/A"], dtype=np.float64)

    def architecture(self) -> dict:
        return {"type": "linear", "name": self.name, "d": self.d, "k": self.k}


def linear_generate(gen: LinearGenerator, z: LatentCode) -> np.ndarray:
    if z.zn.shape[0] != gen.d or z.zc.shape[0] != gen.k:
        raise ValueError(f"latent dims ({z.zn.shape[0]}, {z.zc.shape[0]}) != generator ({gen.d}, {gen.k})")
    return z.zn + gen.A.data @ z.zc


def grad_wrt_input(net: MlpNetwork, x) -> Tensor:
    """Per-row dD/dx as a differentiable function of the parameters.

    Activations are piecewise linear, so the Jacobian is a chain of weight
    matrices and constant slope masks; building that chain with graph ops lets
    a penalty on its norm be differentiated with respect to the weights.
    """
    bad = {l.kind for l in net.layers} - DOUBLE_BACKPROP_SAFE
    if bad:
        raise ValueError(f"{net.name}: grad_wrt_input unsupported for layers {sorted(bad)}")
    if net.output_dim != 1:
        raise ValueError(f"{net.name}: grad_wrt_input needs a scalar output, got {net.output_dim}")
    x = ad.as_tensor(x)
    h = x.data
    slopes = []
    for i, layer in enumerate(net.layers):
        if layer.kind == "linear":
            h = h @ net.params[f"{i}.weight"].data + net.params[f"{i}.bias"].data
            slopes.append(None)
        else:
            alpha = 0.0 if layer.kind == "relu" else layer.alpha
            s = np.where(h > 0, 1.0, alpha)
            h = h * s
            slopes.append(s)
    g = Tensor(np.ones((x.shape[0], 1)))
    for i in reversed(range(len(net.layers))):
        if net.layers[i].kind == "linear":
            g = ad.matmul(g, ad.transpose(net.params[f"{i}.weight"]))
        else:
            g = ad.mul(g, slopes[i])
    return g


# ------------------------------------------------------------------ presets

PRESETS = {
    # data_dim follows the architecture tables; callers pass the real width
    "synthetic": {"dn": 6, "k": 4, "data_dim": 16, "output": "sigmoid", "batchnorm": True},
    "pendigits": {"dn": 5, "k": 10, "data_dim": 16, "output": "sigmoid", "batchnorm": True},
    "counts": {"dn": 30, "k": 8, "data_dim": 720, "output": "linear", "batchnorm": False},
}


def _hidden(width: int, depth: int, leak: float, batchnorm: bool) -> list[Layer]:
    layers = []
    for _ in range(depth):
        layers += [Layer("linear", width), Layer("leaky_relu", alpha=leak)]
        if batchnorm:
            layers.append(Layer("batchnorm", width))
    return layers


def build_stack(preset: str, spec: LatentSpec | None = None, data_dim: int | None = None,
                hidden_width: int = 256, depth: int = 2, batchnorm: bool = False, leak: float = 0.2,
                critic: bool = True, seed: int = 0) -> tuple[MlpNetwork, MlpNetwork, MlpNetwork]:
    """Generator, encoder and discriminator for a named preset.

    ``batchnorm`` applies to the generator and encoder only when ``critic`` is
    set, because the per-sample gradient penalty needs a batch-independent D.
    """
    try:
        p = PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; known: {sorted(PRESETS)}") from None
    spec = spec or LatentSpec(p["dn"], p["k"])
    data_dim = data_dim or p["data_dim"]
    out_act = [Layer("sigmoid")] if p["output"] == "sigmoid" else []
    g_layers = _hidden(hidden_width, depth, leak, batchnorm) + [Layer("linear", data_dim)] + out_act
    e_layers = _hidden(hidden_width, depth, leak, batchnorm) + [Layer("linear", spec.dim),
                                                                 Layer("softmax_tail", spec.k)]
    d_layers = _hidden(hidden_width, depth, leak, batchnorm and not critic) + [Layer("linear", 1)]
    G = MlpNetwork(spec.dim, g_layers, seed=derive_seed(seed, 0), name="G")
    E = MlpNetwork(data_dim, e_layers, seed=derive_seed(seed, 1), name="E")
    D = MlpNetwork(data_dim, d_layers, seed=derive_seed(seed, 2), name="D", double_backprop=critic)
    return G, E, D


def build_synthetic_stack(spec: LatentSpec | None = None, data_dim: int = 16, **kw):
    return build_stack("synthetic", spec or LatentSpec(6, 4), data_dim, **kw)


def build_pendigits_stack(spec: LatentSpec | None = None, data_dim: int = 16, **kw):
    return build_stack("pendigits", spec or LatentSpec(5, 10), data_dim, **kw)


def build_counts_stack(spec: LatentSpec | None = None, data_dim: int = 720, **kw):
    return build_stack("counts", spec or LatentSpec(30, 8), data_dim, **kw)


def build_classifier(input_dim: int, n_classes: int, width: int = 256, seed: int = 0) -> MlpNetwork:
    layers = [Layer("linear", width), Layer("leaky_relu", alpha=0.2),
              Layer("linear", width), Layer("leaky_relu", alpha=0.2), Layer("linear", n_classes)]
    return MlpNetwork(input_dim, layers, seed=seed, name="classifier")


# --------------------------------------------------------------- checkpoints

def network_from_architecture(arch: dict):
    if arch["type"] == "linear":
        return LinearGenerator(np.zeros((arch["d"], arch["k"])), name=arch["name"])
    layers = [Layer(**l) for l in arch["layers"]]
    return MlpNetwork(arch["input_dim"], layers, name=arch["name"],
                      double_backprop=arch.get("double_backprop", False))


def save_checkpoint(path: str | Path, nets: dict, config: dict | None = None) -> None:
    """One ``.npz`` file: little-endian float64 arrays keyed ``net/param/name`` plus a
    JSON header with architectures and the run config."""
    arrays = {}
    for net_name, net in nets.items():
        for key, value in net.state_dict().items():
            arrays[f"{net_name}/{key}"] = np.ascontiguousarray(value, dtype="<f8")
    header = {"format": "clustergan-checkpoint-1", "init": INIT_SCHEME,
              "architectures": {k: v.architecture() for k, v in nets.items()},
              "config": config or {}}
    arrays["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> tuple[dict, dict]:
    with np.load(path, allow_pickle=False) as npz:
        header = json.loads(npz["__header__"].tobytes().decode())
        arrays = {k: npz[k] for k in npz.files if k != "__header__"}
    nets = {}
    for net_name, arch in header["architectures"].items():
        net = network_from_architecture(arch)
        prefix = f"{net_name}/"
        net.load_state_dict({k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)})
        nets[net_name] = net
    return nets, header["config"]
