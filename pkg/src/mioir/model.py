"""Miniature restoration backbone with prompt injection, and the task classifier.

The backbone is ``head conv -> M x (conv + leaky ReLU) -> tail conv`` with a
global residual. When prompting is enabled, a shared three-layer extractor
turns the prompt image into a feature vector and one dense head per block
maps it to a per-channel scale and bias applied to that block's output.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from mioir import checkpoint
from mioir import nncore as nn
from mioir.degrade import make_rng
from mioir.tasks import NUM_TASKS, TASKS, TaskId

PROMPT_MODES = ("none", "explicit", "adaptive")


@dataclass
class BackboneConfig:
    channels: int = 16
    blocks: int = 4
    patch: int = 32
    prompt_mode: str = "none"
    prompt_dim: int = 32
    extractor_channels: tuple[int, int] = (16, 32)
    learnable_prompts: bool = False
    tail_scale: float = 0.1

    def __post_init__(self):
        if self.prompt_mode not in PROMPT_MODES:
            raise ValueError(f"prompt mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if min(self.channels, self.blocks, self.prompt_dim) < 1:
            raise ValueError("channels, blocks and prompt_dim must be >= 1")
        self.extractor_channels = tuple(int(c) for c in self.extractor_channels)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ClassifierConfig:
    channels: tuple[int, int, int] = (32, 64, 64)
    patch: int = 32

    def to_dict(self):
        return dataclasses.asdict(self)


def make_explicit_prompt(task, patch: int) -> np.ndarray:
    """Fixed prompt image for ``task``: value ``(index + 1) / 7`` on channel ``index % 3``."""
    t = TaskId(task)
    p = np.zeros((patch, patch, 3))
    p[:, :, t.index % 3] = (t.index + 1) / NUM_TASKS
    return p


def interpolate_prompts(task_a, task_b, alpha: float, patch: int) -> np.ndarray:
    """Pixelwise blend ``(1 - alpha) * P_a + alpha * P_b``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * make_explicit_prompt(task_a, patch) + alpha * make_explicit_prompt(task_b, patch)


def _conv_init(rng, k, cin, cout, scale=1.0):
    std = scale * np.sqrt(2.0 / (k * k * cin))
    return rng.normal(0.0, std, size=(k, k, cin, cout))


class _Module:
    """Holds a flat, ordered ``name -> Tensor`` parameter dict."""

    params: dict

    def parameters(self) -> dict:
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict:
        return {k: p.grad for k, p in self.params.items() if p.grad is not None}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        missing = set(self.params) - set(arrays)
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
        for k, p in self.params.items():
            a = arrays[k]
            if a.shape != p.data.shape:
                raise checkpoint.CheckpointError(f"parameter {k}: shape {a.shape}, expected {p.data.shape}")
            p.data = np.array(a, dtype=p.data.dtype)

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self

    def num_params(self, prefix: str = "") -> int:
        return sum(p.data.size for k, p in self.params.items() if k.startswith(prefix))


class RestorationNet(_Module):
    def __init__(self, config: BackboneConfig | None = None, seed: int = 0):
        self.config = cfg = config or BackboneConfig()
        rng = make_rng(seed, "init", "restoration")
        C = cfg.channels
        p = {}
        with_dtype = nn.default_dtype()
        p["head.w"] = _conv_init(rng, 3, 3, C)
        p["head.b"] = np.zeros(C)
        for m in range(cfg.blocks):
            p[f"body{m}.w"] = _conv_init(rng, 3, C, C)
            p[f"body{m}.b"] = np.zeros(C)
        p["tail.w"] = _conv_init(rng, 3, C, 3, cfg.tail_scale)
        p["tail.b"] = np.zeros(3)
        if cfg.prompt_mode != "none":
            c1, c2 = cfg.extractor_channels
            D = cfg.prompt_dim
            for i, (cin, cout) in enumerate([(3, c1), (c1, c2), (c2, D)]):
                p[f"ext{i}.w"] = _conv_init(rng, 3, cin, cout)
                p[f"ext{i}.b"] = np.zeros(cout)
            for m in range(cfg.blocks):
                # identity injection at start: s = 1, b = 0
                p[f"fc{m}.w"] = np.zeros((D, 2 * C))
                p[f"fc{m}.b"] = np.concatenate([np.ones(C), np.zeros(C)])
            if cfg.prompt_mode == "explicit" and cfg.learnable_prompts:
                for t in TASKS:
                    p[f"prompt.{t.value}"] = make_explicit_prompt(t, cfg.patch)
        self.params = {k: nn.parameter(np.asarray(v, dtype=with_dtype), name=k) for k, v in p.items()}

    # -- prompts -----------------------------------------------------------

    def prompt_images(self, tasks) -> nn.Tensor:
        """Stacked explicit prompts ``(N, patch, patch, 3)`` for a list of tasks."""
        cfg = self.config
        if cfg.learnable_prompts:
            # one-hot selection keeps the graph differentiable w.r.t. the prompt tables
            out = None
            for t in TASKS:
                sel = np.array([TaskId(x) is t for x in tasks], dtype=nn.default_dtype())[:, None, None, None]
                if not sel.any():
                    continue
                term = nn.mul(self.params[f"prompt.{t.value}"], sel)
                out = term if out is None else nn.add(out, term)
            return out
        return nn.Tensor(np.stack([make_explicit_prompt(t, cfg.patch) for t in tasks]).astype(self._dtype()))

    def _dtype(self):
        return self.params["head.w"].data.dtype

    def extract_features(self, prompt) -> nn.Tensor:
        """Pooled extractor features ``(N, D)`` of a prompt batch ``(N, h, w, 3)``."""
        if self.config.prompt_mode == "none":
            raise ValueError("model has no prompt extractor (prompt mode 'none')")
        h = nn.as_tensor(prompt)
        if h.ndim != 4 or h.shape[-1] != 3:
            raise ValueError(f"prompt must be (N, h, w, 3), got {h.shape}")
        p = self.params
        for i in range(3):
            h = nn.leaky_relu(nn.conv2d(h, p[f"ext{i}.w"], p[f"ext{i}.b"], stride=2))
        return nn.global_avg_pool(h)

    def extract_prompt(self, prompt):
        """Per-block ``(s_m, b_m)`` pairs, each ``(N, C)``."""
        feat = self.extract_features(prompt)
        C = self.config.channels
        out = []
        for m in range(self.config.blocks):
            sb = nn.dense(feat, self.params[f"fc{m}.w"], self.params[f"fc{m}.b"])
            out.append((nn.slice_last(sb, 0, C), nn.slice_last(sb, C, 2 * C)))
        return out

    def resolve_prompt(self, x, task_hint=None, prompt=None):
        """Prompt batch for input ``x`` according to the prompt mode."""
        mode = self.config.prompt_mode
        if prompt is not None:
            pr = nn.as_tensor(prompt)
            if pr.ndim == 3:
                pr = nn.Tensor(np.broadcast_to(pr.data, (len(x),) + pr.shape).astype(self._dtype()))
            return pr
        if mode == "adaptive":
            return nn.as_tensor(x)
        if task_hint is None:
            raise ValueError("explicit prompt mode needs a task hint (label, classifier output or manual flag)")
        if isinstance(task_hint, (str, TaskId)):
            task_hint = [task_hint] * len(x)
        if len(task_hint) != len(x):
            raise ValueError(f"{len(task_hint)} task hints for a batch of {len(x)}")
        return self.prompt_images(task_hint)

    # -- forward -----------------------------------------------------------

    def forward(self, x, task_hint=None, *, prompt=None, clip: bool = False) -> nn.Tensor:
        """Restore a batch ``x`` of shape ``(N, H, W, 3)``.

        ``prompt`` overrides the mode's own prompt source with explicit
        prompt images (used for interpolation). ``clip`` is for evaluation.
        """
        x = nn.as_tensor(np.asarray(x.data if isinstance(x, nn.Tensor) else x, dtype=self._dtype()))
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ValueError(f"input must be (N, H, W, 3), got {x.shape}")
        p = self.params
        mods = None
        if self.config.prompt_mode != "none":
            mods = self.extract_prompt(self.resolve_prompt(x.data, task_hint, prompt))
        h = nn.conv2d(x, p["head.w"], p["head.b"])
        for m in range(self.config.blocks):
            h = nn.leaky_relu(nn.conv2d(h, p[f"body{m}.w"], p[f"body{m}.b"]))
            if mods is not None:
                h = nn.channel_affine(h, *mods[m])
        out = nn.add(x, nn.conv2d(h, p["tail.w"], p["tail.b"]))
        if clip:
            return nn.Tensor(np.clip(out.data, 0.0, 1.0))
        return out

    __call__ = forward

    def prompt_param_count(self) -> int:
        return sum(self.num_params(pre) for pre in ("ext", "fc"))

    def expected_prompt_param_count(self) -> int:
        cfg = self.config
        if cfg.prompt_mode == "none":
            return 0
        c1, c2 = cfg.extractor_channels
        D, C = cfg.prompt_dim, cfg.channels
        f_ext = sum(9 * cin * cout + cout for cin, cout in [(3, c1), (c1, c2), (c2, D)])
        return f_ext + cfg.blocks * (2 * C * D + 2 * C)

    # -- persistence -------------------------------------------------------

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "restoration", "config": self.config.to_dict(), **(extra_meta or {})}
        return checkpoint.write(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "RestorationNet":
        arrays, meta = checkpoint.read(path)
        return cls.from_arrays(arrays, meta)

    @classmethod
    def from_arrays(cls, arrays, meta) -> "RestorationNet":
        if meta.get("kind") not in ("restoration", "run"):
            raise checkpoint.CheckpointError(f"not a restoration checkpoint (kind={meta.get('kind')!r})")
        cfg = meta["config"] if meta.get("kind") == "restoration" else meta["model_config"]
        net = cls(BackboneConfig(**cfg))
        net.load_arrays({k: v for k, v in arrays.items() if k in net.params})
        return net


class Classifier(_Module):
    """Three stride-2 convolutions, global pooling and a dense layer to 7 logits."""

    def __init__(self, config: ClassifierConfig | None = None, seed: int = 0):
        self.config = cfg = config or ClassifierConfig()
        rng = make_rng(seed, "init", "classifier")
        p = {}
        cin = 3
        for i, cout in enumerate(cfg.channels):
            p[f"conv{i}.w"] = _conv_init(rng, 3, cin, cout)
            p[f"conv{i}.b"] = np.zeros(cout)
            cin = cout
        p["fc.w"] = rng.normal(0.0, np.sqrt(1.0 / cin), size=(cin, NUM_TASKS))
        p["fc.b"] = np.zeros(NUM_TASKS)
        dtype = nn.default_dtype()
        self.params = {k: nn.parameter(np.asarray(v, dtype=dtype), name=k) for k, v in p.items()}

    def forward(self, x) -> nn.Tensor:
        h = nn.as_tensor(np.asarray(x.data if isinstance(x, nn.Tensor) else x, dtype=self.params["fc.w"].data.dtype))
        if h.ndim != 4 or h.shape[-1] != 3:
            raise ValueError(f"input must be (N, H, W, 3), got {h.shape}")
        for i in range(len(self.config.channels)):
            h = nn.leaky_relu(nn.conv2d(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"], stride=2))
        return nn.dense(nn.global_avg_pool(h), self.params["fc.w"], self.params["fc.b"])

    __call__ = forward

    def save(self, path, extra_meta: dict | None = None):
        meta = {"kind": "classifier", "config": self.config.to_dict(), **(extra_meta or {})}
        return checkpoint.write(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "Classifier":
        arrays, meta = checkpoint.read(path)
        if meta.get("kind") != "classifier":
            raise checkpoint.CheckpointError(f"{path}: not a classifier checkpoint")
        clf = cls(ClassifierConfig(**meta["config"]))
        clf.load_arrays(arrays)
        return clf


def argmax_task(logits: np.ndarray) -> list[TaskId]:
    """Row-wise argmax; ties go to the lowest task index."""
    logits = np.atleast_2d(np.asarray(logits))
    return [TaskId.from_index(int(i)) for i in np.argmax(logits, axis=1)]


def classify(x, classifier: Classifier | None):
    """Predicted task(s) and logits for one image ``(H, W, 3)`` or a batch."""
    if classifier is None or not getattr(classifier, "params", None):
        raise ValueError("classifier is not initialized")
    single = np.ndim(x) == 3
    batch = np.asarray(x)[None] if single else np.asarray(x)
    logits = classifier(batch).data
    tasks = argmax_task(logits)
    return (tasks[0], logits[0]) if single else (tasks, logits)
