"""Graph-WaveNet style next-frame forecaster over skeletal quaternion trajectories.

Tensors inside the network use the layout ``(batch, time, joint, channel)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .skeleton import Skeleton, build_chain_table, build_subgraphs, parse_skeleton

OUTPUT_MODES = ("absolute", "velocity")


class ModelUsageError(ValueError):
    """The model was called with inputs that violate its contract."""


@dataclass(frozen=True)
class ModelConfig:
    joint_dim: int = 4
    embed_dim: int = 64
    n_blocks: int = 5
    block_dim: int = 64
    skip_dim: int = 256
    mlp_hidden: int = 256
    spatial_kernel: int = 3
    temporal_kernel: int = 2
    dilations: tuple[int, ...] = (1, 2, 4, 8, 16)
    output_mode: str = "velocity"
    swap_subgraphs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) != self.n_blocks:
            raise ValueError(f"{self.n_blocks} blocks need {self.n_blocks} dilations, got {self.dilations}")
        if any(d < 1 for d in self.dilations):
            raise ValueError("dilations must be positive")
        if self.spatial_kernel != 3:
            raise ValueError("spatial_kernel must equal the chain length 3")
        if self.temporal_kernel < 1:
            raise ValueError("temporal_kernel must be positive")
        if self.n_blocks and self.embed_dim != self.block_dim:
            raise ValueError("the residual path needs embed_dim == block_dim")
        if self.output_mode not in OUTPUT_MODES:
            raise ValueError(f"output_mode must be one of {OUTPUT_MODES}")
        if self.output_mode == "velocity" and self.joint_dim != 4:
            raise ValueError("velocity mode composes quaternions and needs joint_dim == 4")

    @property
    def receptive_field(self) -> int:
        return 1 + (self.temporal_kernel - 1) * sum(self.dilations)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config
    shapes = {"embed.W": (c.joint_dim, c.embed_dim), "embed.b": (c.embed_dim,)}
    for n in range(c.n_blocks):
        p = f"blocks.{n}."
        shapes[p + "st_conv.W"] = (c.spatial_kernel, c.temporal_kernel, c.block_dim, 2 * c.block_dim)
        shapes[p + "st_conv.b"] = (2 * c.block_dim,)
        for i in range(3):
            shapes[p + f"kgcn.W{i}"] = (c.block_dim, c.block_dim)
        shapes[p + "kgcn.b"] = (c.block_dim,)
        shapes[p + "skip.W"] = (c.block_dim, c.skip_dim)
        shapes[p + "skip.b"] = (c.skip_dim,)
    shapes["mlp.W1"] = (c.skip_dim, c.mlp_hidden)
    shapes["mlp.b1"] = (c.mlp_hidden,)
    shapes["mlp.W2"] = (c.mlp_hidden, c.joint_dim)
    shapes["mlp.b2"] = (c.joint_dim,)
    return shapes


def count_parameters(config: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in parameter_shapes(config).values())


def init_parameters(config: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fan-in scaled uniform weights, zero biases.

    In velocity mode the output bias starts at the identity quaternion so the
    untrained network predicts small rotation increments.
    """
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.rsplit(".", 1)[1].startswith("b"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = 1.0 / np.sqrt(fan_in)
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True)
    if config.output_mode == "velocity":
        params["mlp.b2"].data[0] = 1.0
    return params


# ---------------------------------------------------------------- operations


def st_conv(x: Tensor, chain_table: np.ndarray, kernel: Tensor, bias: Tensor, dilation: int) -> Tensor:
    """Causal dilated convolution over each joint's (grandparent, parent, joint) chain.

    Args:
        x: features ``(B, T, J, C_in)``.
        chain_table: ``(J, 3)`` joint indices.
        kernel: ``(3, kt, C_in, C_out)``.
        bias: ``(C_out,)``.

    Returns:
        ``(B, T, J, C_out)``.
    """
    B, T, J, c_in = x.shape
    ks, kt, k_in, c_out = kernel.shape
    if chain_table.shape != (J, ks) or k_in != c_in:
        raise DimensionError(f"st_conv: chain table {chain_table.shape}, kernel {kernel.shape}, input {x.shape}")
    if dilation * (kt - 1) >= T:
        raise DimensionError(f"st_conv: dilation {dilation} reaches past a {T}-frame input")
    # (B, J*3, T, C) slab of chain trajectories, convolved as B*J images of height 3
    slab = ad.take(ad.transpose(x, (0, 2, 1, 3)), chain_table.reshape(-1), axis=1)
    slab = ad.reshape(slab, (B * J, ks, T, c_in))
    out = ad.conv2d_causal_dilated(slab, ad.transpose(kernel, (3, 2, 0, 1)), dilation, channels_last=True)
    out = ad.transpose(ad.reshape(out, (B, J, T, c_out)), (0, 2, 1, 3))
    return out + bias


def gated_activation(h: Tensor) -> Tensor:
    """``tanh(filter) * sigmoid(gate)`` over the two channel halves."""
    filt, gate = ad.split_half(h)
    return ad.tanh(filt) * ad.sigmoid(gate)


def k_gcn(x: Tensor, propagators: np.ndarray, weights, bias: Tensor) -> Tensor:
    """Sum of row-normalized aggregations over three subgraphs, each with its own weight.

    ``propagators`` holds ``D_i^{-1} A_i`` with shape ``(3, J, J)``.
    """
    if propagators.shape[1:] != (x.shape[-2], x.shape[-2]):
        raise DimensionError(f"k_gcn: propagators {propagators.shape} do not match input {x.shape}")
    out = None
    for p, w in zip(propagators, weights):
        term = ad.matmul(ad.graph_propagate(p, x), w)
        out = term if out is None else out + term
    return out + bias


def block_forward(x: Tensor, chain_table, propagators, params: dict, dilation: int, skip_steps=None):
    """One spatio-temporal block.

    Returns ``(x + y, skip(y))`` where ``y = k_gcn(gated(st_conv(x)))``. With
    ``skip_steps`` set, the skip projection is computed only for the last
    ``skip_steps`` frames.
    """
    h = st_conv(x, chain_table, params["st_conv.W"], params["st_conv.b"], dilation)
    y = k_gcn(
        gated_activation(h),
        propagators,
        [params[f"kgcn.W{i}"] for i in range(3)],
        params["kgcn.b"],
    )
    tap = y if skip_steps is None else y[:, -skip_steps:]
    return x + y, ad.pointwise_linear(tap, params["skip.W"], params["skip.b"])


def time_schedule(length: int, dilations, temporal_kernel: int) -> list[np.ndarray]:
    """Frame positions each block must produce for the last frame's output.

    Entry ``n`` lists the positions of block ``n``'s input that the final
    frame depends on; the last entry is ``[length - 1]``.
    """
    needed = [np.array([length - 1])]
    for d in reversed(tuple(dilations)):
        out = needed[0]
        src = np.concatenate([out - k * d for k in range(temporal_kernel)])
        needed.insert(0, np.unique(src[src >= 0]))
    return needed


@dataclass(frozen=True)
class _BlockPlan:
    taps: tuple[np.ndarray, ...]
    keep: np.ndarray


def _block_plans(schedule: list[np.ndarray], dilations, temporal_kernel: int) -> list[_BlockPlan]:
    plans = []
    for n, d in enumerate(dilations):
        src, out = schedule[n], schedule[n + 1]
        taps = []
        # tap k reads frame t - (kt - 1 - k) * d; frames before 0 hit the zero row at len(src)
        for k in range(temporal_kernel):
            pos = out - (temporal_kernel - 1 - k) * d
            taps.append(np.where(pos >= 0, np.searchsorted(src, pos), len(src)))
        plans.append(_BlockPlan(tuple(taps), np.searchsorted(src, out)))
    return plans


def st_conv_at(x: Tensor, chain_table: np.ndarray, kernel: Tensor, bias: Tensor, taps) -> Tensor:
    """``st_conv`` evaluated only at selected output frames.

    ``x`` holds ``(B, P_in, J, C_in)`` features at a subset of frames and
    ``taps[k]`` indexes, for every output frame, the input row read by
    temporal tap ``k`` (``P_in`` addresses an implicit zero row).
    """
    B, P, J, c_in = x.shape
    ks, kt, _, c_out = kernel.shape
    padded = ad.concat([x, Tensor(np.zeros((B, 1, J, c_in)))], axis=1)
    slab = ad.reshape(ad.take(padded, chain_table.reshape(-1), axis=2), (B, P + 1, J, ks * c_in))
    cols = ad.concat([ad.take(slab, idx, axis=1) for idx in taps], axis=-1)
    w = ad.reshape(ad.transpose(kernel, (1, 0, 2, 3)), (kt * ks * c_in, c_out))
    return ad.pointwise_linear(cols, w, bias)


def _block_at(x: Tensor, chain_table, propagators, params: dict, plan: _BlockPlan) -> tuple[Tensor, Tensor]:
    h = st_conv_at(x, chain_table, params["st_conv.W"], params["st_conv.b"], plan.taps)
    y = k_gcn(
        gated_activation(h),
        propagators,
        [params[f"kgcn.W{i}"] for i in range(3)],
        params["kgcn.b"],
    )
    return ad.take(x, plan.keep, axis=1) + y, y


class GraphWaveNet:
    """Forecaster bound to one skeleton and one parameter set."""

    def __init__(self, config: ModelConfig, skeleton: Skeleton, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.skeleton = skeleton
        self.chain_table = build_chain_table(skeleton)
        self.subgraphs = build_subgraphs(skeleton, swap_directions=config.swap_subgraphs)
        self.propagators = self.subgraphs.normalized
        if params is None:
            params = init_parameters(config, np.random.default_rng(seed))
        expected = parameter_shapes(config)
        if set(params) != set(expected):
            raise ModelUsageError(f"parameter names differ: {sorted(set(params) ^ set(expected))}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ModelUsageError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.params = params
        self._blocks = [
            {k[len(f"blocks.{n}.") :]: v for k, v in params.items() if k.startswith(f"blocks.{n}.")}
            for n in range(config.n_blocks)
        ]
        self._plan = None

    @property
    def num_joints(self) -> int:
        return self.skeleton.num_joints

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _check_seed(self, seed: Tensor) -> None:
        rf = self.config.receptive_field
        if seed.ndim != 4 or seed.shape[2:] != (self.num_joints, self.config.joint_dim):
            raise ModelUsageError(f"seed must be (B, {rf}, {self.num_joints}, {self.config.joint_dim}), got {seed.shape}")
        if seed.shape[1] != rf:
            raise ModelUsageError(f"seed length {seed.shape[1]} differs from the receptive field {rf}")

    def forward(self, seed, normalize_output: bool = True) -> Tensor:
        """Predict the frame after ``seed`` of shape ``(B, T, J, d_j)``; returns ``(B, J, d_j)``."""
        seed = ad.as_tensor(seed)
        self._check_seed(seed)
        p = self.params
        B, T, J, dj = seed.shape
        if self._plan is None:
            schedule = time_schedule(T, self.config.dilations, self.config.temporal_kernel)
            self._plan = (schedule[0], _block_plans(schedule, self.config.dilations, self.config.temporal_kernel))
        first, plans = self._plan
        x = ad.pointwise_linear(ad.take(seed, first, axis=1), p["embed.W"], p["embed.b"])
        skip = None
        for n, plan in enumerate(plans):
            block = self._blocks[n]
            x, y = _block_at(x, self.chain_table, self.propagators, block, plan)
            tap = ad.pointwise_linear(y[:, -1:], block["skip.W"], block["skip.b"])
            skip = tap if skip is None else skip + tap
        if skip is None:
            skip = Tensor(np.zeros((B, 1, J, self.config.skip_dim)))
        return self._head(seed, skip, normalize_output)

    def forward_dense(self, seed, normalize_output: bool = True) -> Tensor:
        """Same output as ``forward``, computing every block at every frame."""
        seed = ad.as_tensor(seed)
        self._check_seed(seed)
        x = ad.pointwise_linear(seed, self.params["embed.W"], self.params["embed.b"])
        skip = None
        for block, d in zip(self._blocks, self.config.dilations):
            x, tap = block_forward(x, self.chain_table, self.propagators, block, d, skip_steps=1)
            skip = tap if skip is None else skip + tap
        if skip is None:
            skip = Tensor(np.zeros((seed.shape[0], 1, self.num_joints, self.config.skip_dim)))
        return self._head(seed, skip, normalize_output)

    def _head(self, seed: Tensor, skip: Tensor, normalize_output: bool) -> Tensor:
        p = self.params
        B, _, J, dj = seed.shape
        h = ad.pointwise_linear(ad.relu(skip), p["mlp.W1"], p["mlp.b1"])
        out = ad.pointwise_linear(ad.relu(h), p["mlp.W2"], p["mlp.b2"])
        out = ad.reshape(out, (B, J, dj))
        if self.config.output_mode == "velocity":
            out = ad.hamilton_product(seed[:, -1], ad.normalize_last(out))
        if normalize_output:
            out = ad.normalize_last(out)
        return out

    def autoregress(self, seed, horizon: int, normalize_output: bool = True, targets=None) -> Tensor:
        """Roll the model forward ``horizon`` frames, sliding the seed window.

        With ``targets`` given (``(B, horizon, J, d_j)``), ground-truth frames are
        fed back instead of predictions (teacher forcing).
        """
        if horizon < 1:
            raise ModelUsageError("horizon must be at least 1")
        window = ad.as_tensor(seed)
        self._check_seed(window)
        B, _, J, dj = window.shape
        preds = []
        for step in range(horizon):
            pred = ad.reshape(self.forward(window, normalize_output), (B, 1, J, dj))
            preds.append(pred)
            if step + 1 < horizon:
                nxt = pred if targets is None else ad.as_tensor(targets)[:, step : step + 1]
                window = ad.concat([window[:, 1:], nxt], axis=1)
        return preds[0] if horizon == 1 else ad.concat(preds, axis=1)

    def predict(self, seed: np.ndarray, horizon: int) -> np.ndarray:
        """Gradient-free autoregressive forecast on plain arrays."""
        with ad.no_grad():
            return self.autoregress(Tensor(seed), horizon).numpy()

    __call__ = predict


# --------------------------------------------------------------- checkpoints


def save_checkpoint(directory, model: GraphWaveNet, extra: dict | None = None) -> Path:
    """Write ``config.json``, ``skeleton.txt`` and one tensor file per parameter."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    config = model.config.to_dict()
    config["num_joints"] = model.num_joints
    if extra:
        config.update(extra)
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    (directory / "skeleton.txt").write_text(model.skeleton.to_text())
    for name, t in model.params.items():
        ad.save_tensor(directory / "params" / f"{name}.sftn", t)
    return directory


def load_checkpoint(directory) -> GraphWaveNet:
    directory = Path(directory)
    if not (directory / "config.json").is_file():
        raise FileNotFoundError(f"no checkpoint at {directory}")
    raw = json.loads((directory / "config.json").read_text())
    config = ModelConfig.from_dict(raw)
    skeleton = parse_skeleton((directory / "skeleton.txt").read_text())
    if raw.get("num_joints", skeleton.num_joints) != skeleton.num_joints:
        raise ModelUsageError("checkpoint config and skeleton disagree on the joint count")
    params = {}
    for name in parameter_shapes(config):
        t = ad.load_tensor(directory / "params" / f"{name}.sftn")
        params[name] = Tensor(t.data, requires_grad=True)
    return GraphWaveNet(config, skeleton, params)
