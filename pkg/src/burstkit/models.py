"""ResNet trunks, embedding aggregators and hard-parameter-shared task heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .data import AGE_CENTER, Batch
from .tensor import Tensor

TASKS = ("emotion", "country", "age")
HEAD_KINDS = ("mean", "fc128", "lstm128", "netvlad5", "autopool")
RESNET_DEPTHS = ("18", "34", "50", "mini")
MIN_INPUT = 8


# ---------------------------------------------------------------------------
# module plumbing


class Module:
    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            if name.startswith("running_") and isinstance(value, np.ndarray):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{i}.")
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{key}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            items = value.values() if isinstance(value, dict) else value if isinstance(value, (list, tuple)) else [value]
            for item in items:
                if isinstance(item, Module):
                    yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in [*params, *buffers] if k not in state]
        if missing:
            raise KeyError(f"state is missing {len(missing)} entries, e.g. {missing[0]!r}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {state[name].shape} != model shape {p.shape}")
            p.data[...] = state[name]
        for name, b in buffers.items():
            b[...] = state[name]

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())


def _param(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=T.get_default_dtype()), requires_grad=True)


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return _param(rng.uniform(-bound, bound, shape))


class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = he_uniform(rng, (n_in, n_out), n_in)
        self.bias = _param(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, n_in: int, n_out: int, kernel: int, rng, stride: int = 1, padding: int = 0):
        self.weight = he_uniform(rng, (n_out, n_in, kernel, kernel), n_in * kernel * kernel)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, None, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels: int):
        dtype = T.get_default_dtype()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


# ---------------------------------------------------------------------------
# ResNet trunks


@dataclass
class ResNetConfig:
    depth: str = "mini"
    dropout_rate: float = 0.5
    in_channels: int = 1

    def __post_init__(self):
        self.depth = str(self.depth)
        if self.depth not in RESNET_DEPTHS:
            raise ValueError(f"depth must be one of {RESNET_DEPTHS}, got {self.depth!r}")

    @property
    def blocks(self) -> list[int]:
        return {"18": [2, 2, 2, 2], "34": [3, 4, 6, 3], "50": [3, 4, 6, 3], "mini": [1, 1]}[self.depth]

    @property
    def widths(self) -> list[int]:
        return [16, 32] if self.depth == "mini" else [64, 128, 256, 512]

    @property
    def bottleneck(self) -> bool:
        return self.depth == "50"

    @property
    def out_dim(self) -> int:
        return self.widths[-1] * (4 if self.bottleneck else 1)


class BasicBlock(Module):
    expansion = 1

    def __init__(self, n_in: int, width: int, stride: int, rng):
        self.conv1 = Conv2d(n_in, width, 3, rng, stride, 1)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv2d(width, width, 3, rng, 1, 1)
        self.bn2 = BatchNorm(width)
        self.proj = None
        if stride != 1 or n_in != width:
            self.proj = Conv2d(n_in, width, 1, rng, stride, 0)
            self.proj_bn = BatchNorm(width)

    def __call__(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(out + skip)


class Bottleneck(Module):
    expansion = 4

    def __init__(self, n_in: int, width: int, stride: int, rng):
        n_out = width * self.expansion
        self.conv1 = Conv2d(n_in, width, 1, rng)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv2d(width, width, 3, rng, stride, 1)
        self.bn2 = BatchNorm(width)
        self.conv3 = Conv2d(width, n_out, 1, rng)
        self.bn3 = BatchNorm(n_out)
        self.proj = None
        if stride != 1 or n_in != n_out:
            self.proj = Conv2d(n_in, n_out, 1, rng, stride, 0)
            self.proj_bn = BatchNorm(n_out)

    def __call__(self, x: Tensor) -> Tensor:
        out = T.relu(self.bn1(self.conv1(x)))
        out = T.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(out + skip)


class ResNet(Module):
    """Spectrogram trunk: stem, max-pool, residual stages, global average pool, dropout."""

    def __init__(self, cfg: ResNetConfig, rng: np.random.Generator):
        self.cfg = cfg
        if cfg.depth == "mini":
            self.stem = Conv2d(cfg.in_channels, cfg.widths[0], 3, rng, 1, 1)
        else:
            self.stem = Conv2d(cfg.in_channels, cfg.widths[0], 7, rng, 2, 3)
        self.stem_bn = BatchNorm(cfg.widths[0])
        block = Bottleneck if cfg.bottleneck else BasicBlock
        self.blocks = []
        n_in = cfg.widths[0]
        for stage, (width, count) in enumerate(zip(cfg.widths, cfg.blocks)):
            for i in range(count):
                stride = 2 if stage > 0 and i == 0 else 1
                self.blocks.append(block(n_in, width, stride, rng))
                n_in = width * block.expansion
        self.out_dim = n_in
        self.dropout_rate = cfg.dropout_rate
        self.rng = np.random.default_rng(0)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[2] < MIN_INPUT or x.shape[3] < MIN_INPUT:
            raise T.ShapeError(
                f"ResNet input must be B x {self.cfg.in_channels} x F x M with F, M >= {MIN_INPUT}; got {x.shape}"
            )
        out = T.relu(self.stem_bn(self.stem(x)))
        out = T.max_pool2d(out, 3, 2, 1)
        for block in self.blocks:
            out = block(out)
        out = T.global_avg_pool2d(out)
        return T.dropout(out, self.dropout_rate, self.training, self.rng)


def resnet_forward(x: Tensor, model: ResNet) -> Tensor:
    return model(x)


# ---------------------------------------------------------------------------
# embedding aggregators (inputs B x T x D with a B x T validity mask)


def _mask(mask, e: Tensor) -> np.ndarray:
    if mask is None:
        return np.ones(e.shape[:2], dtype=e.data.dtype)
    return np.asarray(mask, dtype=e.data.dtype)


def aggregate_mean(e: Tensor, mask=None) -> Tensor:
    m = _mask(mask, e)
    count = m.sum(axis=1, keepdims=True)
    return T.sum_(e * m[..., None], axis=1) / count


def autopool_forward(e: Tensor, alpha: Tensor, mask=None) -> Tensor:
    """Per-dimension softmax(alpha_d * x_td) weighted average over time."""
    m = _mask(mask, e)
    logits = e * alpha
    if mask is not None:
        logits = logits + np.where(m > 0, 0.0, -np.inf)[..., None].astype(e.data.dtype)
    weights = T.softmax(logits, axis=1)
    return T.sum_(weights * e, axis=1)


def netvlad_forward(e: Tensor, centers: Tensor, assign_w: Tensor, assign_b: Tensor, mask=None) -> Tensor:
    """Soft-assigned residual aggregation with intra- and global L2 normalisation.

    ``centers`` and ``assign_w`` are K x D, ``assign_b`` has K entries. Output is B x (K*D).
    """
    m = _mask(mask, e)
    a = T.softmax(T.matmul(e, T.transpose(assign_w)) + assign_b, axis=-1)  # B x T x K
    a = a * m[..., None]
    resid = T.matmul(T.transpose(a, (0, 2, 1)), e)  # B x K x D
    resid = resid - T.sum_(a, axis=1)[..., None] * centers
    v = T.l2_normalize(resid, axis=-1)
    v = T.reshape(v, (e.shape[0], -1))
    return T.l2_normalize(v, axis=-1)


def lstm_forward(e: Tensor, w_x: Tensor, w_h: Tensor, b: Tensor, mask=None) -> Tensor:
    """Unidirectional LSTM; returns the hidden state after each sequence's last valid step.

    Gates are packed as [input, forget, candidate, output] along the last axis.
    """
    m = _mask(mask, e)
    n, steps, _ = e.shape
    units = w_h.shape[0]
    dtype = e.data.dtype
    h = Tensor(np.zeros((n, units), dtype))
    c = Tensor(np.zeros((n, units), dtype))
    for t in range(steps):
        z = T.dense(e[:, t, :], w_x, b) + T.matmul(h, w_h)
        i = T.sigmoid(z[:, :units])
        f = T.sigmoid(z[:, units : 2 * units])
        g = T.tanh(z[:, 2 * units : 3 * units])
        o = T.sigmoid(z[:, 3 * units :])
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        keep = m[:, t : t + 1]
        if np.all(keep == 1):
            h, c = h_new, c_new
        else:
            h = h_new * keep + h * (1 - keep)
            c = c_new * keep + c * (1 - keep)
    return h


class NetVLAD(Module):
    def __init__(self, dim: int, clusters: int, rng, sigma: float = 1.0):
        self.sigma = sigma
        self.centers = _param(rng.standard_normal((clusters, dim)) / np.sqrt(dim))
        self.assign_w = _param(np.zeros((clusters, dim)))
        self.assign_b = _param(np.zeros(clusters))
        self._set_assignment()

    def _set_assignment(self):
        c = self.centers.data
        self.assign_w.data[...] = 2.0 * self.sigma * c
        self.assign_b.data[...] = -self.sigma * (c * c).sum(axis=1)

    def init_from_descriptors(self, descriptors: np.ndarray, rng) -> None:
        """Centers from a random sample of descriptors; assignment from the centers."""
        k = self.centers.shape[0]
        pick = rng.choice(len(descriptors), size=k, replace=len(descriptors) < k)
        self.centers.data[...] = descriptors[pick]
        self._set_assignment()

    def __call__(self, e: Tensor, mask=None) -> Tensor:
        return netvlad_forward(e, self.centers, self.assign_w, self.assign_b, mask)


class AutoPool(Module):
    def __init__(self, dim: int):
        self.alpha = _param(np.zeros(dim))

    def __call__(self, e: Tensor, mask=None) -> Tensor:
        return autopool_forward(e, self.alpha, mask)


class LSTM(Module):
    def __init__(self, dim: int, units: int, rng):
        self.w_x = he_uniform(rng, (dim, 4 * units), dim)
        self.w_h = he_uniform(rng, (units, 4 * units), units)
        self.b = _param(np.zeros(4 * units))

    def __call__(self, e: Tensor, mask=None) -> Tensor:
        return lstm_forward(e, self.w_x, self.w_h, self.b, mask)


class EmbeddingTrunk(Module):
    """Aggregates a window sequence into one vector, optionally appending auxiliary inputs."""

    def __init__(self, kind: str, dim: int, rng, aux_dim: int = 0):
        if kind not in HEAD_KINDS:
            raise ValueError(f"head kind must be one of {HEAD_KINDS}, got {kind!r}")
        self.kind = kind
        self.aux_dim = aux_dim
        self.fc = self.lstm = self.netvlad = self.autopool = None
        if kind == "fc128":
            self.fc = Dense(dim, 128, rng)
            pooled = 128
        elif kind == "lstm128":
            self.lstm = LSTM(dim, 128, rng)
            pooled = 128
        elif kind == "netvlad5":
            self.netvlad = NetVLAD(dim, 5, rng)
            pooled = 5 * dim
        elif kind == "autopool":
            self.autopool = AutoPool(dim)
            pooled = dim
        else:
            pooled = dim
        self.out_dim = pooled + aux_dim

    def __call__(self, e: Tensor, mask=None, aux=None) -> Tensor:
        if self.kind == "mean":
            out = aggregate_mean(e, mask)
        elif self.kind == "fc128":
            out = T.relu(self.fc(aggregate_mean(e, mask)))
        elif self.kind == "lstm128":
            out = self.lstm(e, mask)
        elif self.kind == "netvlad5":
            out = self.netvlad(e, mask)
        else:
            out = self.autopool(e, mask)
        if self.aux_dim:
            if aux is None:
                raise ValueError("trunk expects auxiliary inputs but none were given")
            out = T.concat([out, Tensor(np.asarray(aux, dtype=out.data.dtype))], axis=-1)
        return out


# ---------------------------------------------------------------------------
# multitask model


@dataclass
class ModelConfig:
    family: str = "embedding"  # embedding | resnet
    tasks: tuple[str, ...] = TASKS
    n_emotions: int = 10
    n_countries: int = 4
    head: str = "mean"
    emb_dim: int = 1024
    depth: str = "mini"
    dropout_rate: float = 0.5
    aux_inputs: bool = False

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ValueError("a model needs at least one task")
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ValueError(f"unknown task(s) {bad}; expected a subset of {TASKS}")
        if self.family not in ("embedding", "resnet"):
            raise ValueError(f"family must be 'embedding' or 'resnet', got {self.family!r}")
        if self.family == "resnet" and self.aux_inputs:
            raise ValueError("auxiliary label inputs are only supported for embedding models")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls(**json.loads(Path(path).read_text()))


class MultitaskModel(Module):
    """One trunk shared by every attached task head (hard parameter sharing)."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        if cfg.family == "resnet":
            self.trunk = ResNet(ResNetConfig(cfg.depth, cfg.dropout_rate), rng)
        else:
            aux_dim = cfg.n_countries + 1 if cfg.aux_inputs else 0
            self.trunk = EmbeddingTrunk(cfg.head, cfg.emb_dim, rng, aux_dim)
        sizes = {"emotion": cfg.n_emotions, "country": cfg.n_countries, "age": 1}
        self.heads = {task: Dense(self.trunk.out_dim, sizes[task], rng) for task in cfg.tasks}
        if "age" in self.heads:
            self.heads["age"].bias.data[...] = AGE_CENTER
        self.set_seed(seed)

    @property
    def tasks(self) -> tuple[str, ...]:
        return self.cfg.tasks

    def set_seed(self, seed: int) -> None:
        """Reseed the dropout stream."""
        if isinstance(self.trunk, ResNet):
            self.trunk.rng = np.random.default_rng([seed, 1])

    def features(self, batch: Batch) -> Tensor:
        dtype = T.get_default_dtype()
        x = Tensor(np.asarray(batch.inputs, dtype=dtype))
        if self.cfg.family == "resnet":
            return self.trunk(x)
        return self.trunk(x, batch.mask, batch.aux)

    def __call__(self, batch: Batch, tasks=None) -> dict[str, Tensor]:
        tasks = self.tasks if tasks is None else tuple(tasks)
        missing = [t for t in tasks if t not in self.heads]
        if missing:
            raise KeyError(f"model has no head for task(s) {missing}; attached: {list(self.heads)}")
        feats = self.features(batch)
        out = {}
        for task in tasks:
            z = self.heads[task](feats)
            if task == "country":
                z = T.softmax(z, axis=-1)
            elif task == "age":
                z = T.reshape(z, (-1,))
            out[task] = z
        return out

    def data_init(self, dataset, rng: np.random.Generator) -> None:
        """Data-dependent initialisation (NetVLAD centers)."""
        trunk = self.trunk
        if isinstance(trunk, EmbeddingTrunk) and trunk.netvlad is not None:
            trunk.netvlad.init_from_descriptors(np.concatenate(dataset.features, axis=0), rng)


multitask_forward = MultitaskModel.__call__


def save_model(model: MultitaskModel, path) -> None:
    """Write ``path`` (BKPT weights) and ``path + '.json'`` (architecture sidecar)."""
    T.save_checkpoint(path, model.state_dict())
    model.cfg.save(str(path) + ".json")


def load_model(path) -> MultitaskModel:
    cfg = ModelConfig.load(str(path) + ".json")
    model = MultitaskModel(cfg)
    model.load_state_dict(T.load_checkpoint(path))
    return model
