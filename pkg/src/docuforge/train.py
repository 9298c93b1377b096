"""CycleGAN and conditional-GAN training loops, checkpoints and tiled inference."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import torch

from . import losses as L
from .degrade import TASKS, DatasetManifest
from .errors import DivergenceDetected, InvalidArgument
from .image import ImageTensor, load_image, normalize, window_origins
from .nets import NetHandle, NetSpec, build, load_nets, save_nets, write_npz

CYCLEGAN_EPOCHS = {"background": 12, "blur": 30, "watermark": 12, "fade": 8}
CGAN_EPOCHS = 5
DEFAULT_LR = {"cyclegan": 2e-4, "cgan": 2e-3}

CYCLEGAN_COLUMNS = ("iteration", "loss_g", "loss_d_a", "loss_d_b", "loss_cycle")
CGAN_COLUMNS = ("iteration", "loss_g_adv", "loss_g_perc", "loss_d")


@dataclass
class TrainConfig:
    task: str = "fade"
    model: str = "cyclegan"
    epochs: int | None = None
    learning_rate: float | None = None
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 1
    patch_size: int = 200
    buffer_capacity: int = 50
    cycle_weight: float = 10.0
    cgan_adv_weight: float = 6.6e-3
    cgan_perc_weight: float = 1.0
    base_width: int = 64
    res_blocks: int = 9
    cgan_depth: int = 8
    channels: int = 1
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise InvalidArgument(f"unknown task {self.task!r}")
        if self.model not in ("cyclegan", "cgan"):
            raise InvalidArgument(f"unknown model {self.model!r}")
        if self.epochs is None:
            self.epochs = CYCLEGAN_EPOCHS[self.task] if self.model == "cyclegan" else CGAN_EPOCHS
        if self.learning_rate is None:
            self.learning_rate = DEFAULT_LR[self.model]
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.buffer_capacity < 1:
            raise InvalidArgument("buffer_capacity must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.patch_size < 8 or (self.model == "cyclegan" and self.patch_size % 4):
            raise InvalidArgument("patch_size must be >= 8 (and a multiple of 4 for cyclegan)")
        if self.dtype not in ("float64", "float32"):
            raise InvalidArgument(f"unsupported dtype {self.dtype!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgument(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def weights(self) -> L.LossWeights:
        return L.LossWeights(self.cycle_weight, self.cgan_adv_weight, self.cgan_perc_weight)


class HistoryBuffer:
    """Pool of past generated images fed to the discriminator instead of only the newest."""

    def __init__(self, capacity: int = 50, seed: int = 0):
        if capacity < 1:
            raise InvalidArgument("capacity must be >= 1")
        self.capacity = capacity
        self.pool: list[torch.Tensor] = []
        self.rng = np.random.default_rng(seed)

    def query(self, fresh: torch.Tensor) -> torch.Tensor:
        out = []
        for img in fresh.detach():
            if len(self.pool) < self.capacity:
                self.pool.append(img.clone())
                out.append(img)
            elif self.rng.random() < 0.5:
                out.append(img)
            else:
                i = int(self.rng.integers(self.capacity))
                out.append(self.pool[i])
                self.pool[i] = img.clone()
        return torch.stack(out)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        return self.rng.bit_generator.state, {str(i): t.numpy() for i, t in enumerate(self.pool)}

    def restore(self, rng_state: dict, arrays: dict[str, np.ndarray]):
        self.rng.bit_generator.state = rng_state
        self.pool = [torch.from_numpy(arrays[str(i)].copy()) for i in range(len(arrays))]


# -- data ---------------------------------------------------------------------


def _load_signed(paths: Sequence[Path], channels: int) -> list[np.ndarray]:
    out = []
    for p in paths:
        img = load_image(p)
        if img.channels != channels:
            raise InvalidArgument(f"{p} has {img.channels} channels, expected {channels}")
        out.append(normalize(img, "signed").as_float().transpose(2, 0, 1))
    return out


def _pad_to(arr: np.ndarray, size: int) -> np.ndarray:
    """Reflect-pad a C x H x W array so both spatial sides are at least ``size``."""
    _, h, w = arr.shape
    ph, pw = max(0, size - h), max(0, size - w)
    if ph == 0 and pw == 0:
        return arr
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(arr, ((0, 0), (0, ph), (0, pw)), mode=mode)


def _crop(arr: np.ndarray, size: int, rng: np.random.Generator, offset=None):
    arr = _pad_to(arr, size)
    _, h, w = arr.shape
    if offset is None:
        offset = (int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1)))
    y, x = offset
    return arr[:, y:y + size, x:x + size], offset


# -- checkpoints ----------------------------------------------------------------


@dataclass
class Checkpoint:
    nets: dict[str, NetHandle]
    config: TrainConfig
    epoch: int = 0
    iteration: int = 0
    metric_log: list[dict] = field(default_factory=list)
    optim_state: dict[str, dict] = field(default_factory=dict)
    buffer_state: dict[str, tuple] = field(default_factory=dict)

    @property
    def generator(self) -> NetHandle:
        return self.nets["G_B"] if self.config.model == "cyclegan" else self.nets["G"]

    def save(self, directory) -> Path:
        directory = Path(directory)
        save_nets(self.nets, directory, extra={"config": asdict(self.config), "epoch": self.epoch,
                                               "iteration": self.iteration})
        arrays, meta = {}, {"optim": {}, "buffers": {}}
        for name, sd in self.optim_state.items():
            meta["optim"][name] = {"param_groups": sd["param_groups"], "state": {}}
            for idx, st in sd["state"].items():
                meta["optim"][name]["state"][str(idx)] = sorted(st)
                for key, val in st.items():
                    arrays[f"optim/{name}/{idx}/{key}"] = val.numpy() if isinstance(val, torch.Tensor) else np.asarray(val)
        for name, (rng_state, pool) in self.buffer_state.items():
            meta["buffers"][name] = {"rng": rng_state, "size": len(pool)}
            for k, v in pool.items():
                arrays[f"buffer/{name}/{k}"] = v
        write_npz(directory / "state.npz", arrays)
        (directory / "state.json").write_text(json.dumps(meta, sort_keys=True))
        write_metric_log(self.metric_log, directory / "metrics.csv", self.config.model)
        return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = TrainConfig.from_dict(manifest["config"])
    ckpt = Checkpoint(load_nets(directory), cfg, manifest["epoch"], manifest["iteration"])
    ckpt.metric_log = read_metric_log(directory / "metrics.csv") if (directory / "metrics.csv").exists() else []
    state_json = directory / "state.json"
    if state_json.exists():
        meta = json.loads(state_json.read_text())
        with np.load(directory / "state.npz") as data:
            for name, sd in meta["optim"].items():
                state = {}
                for idx, keys in sd["state"].items():
                    state[int(idx)] = {k: torch.from_numpy(data[f"optim/{name}/{idx}/{k}"].copy()) for k in keys}
                ckpt.optim_state[name] = {"state": state, "param_groups": sd["param_groups"]}
            for name, b in meta["buffers"].items():
                pool = {str(i): data[f"buffer/{name}/{i}"] for i in range(b["size"])}
                ckpt.buffer_state[name] = (b["rng"], pool)
    return ckpt


def write_metric_log(log: Sequence[dict], path, model: str) -> None:
    cols = CYCLEGAN_COLUMNS if model == "cyclegan" else CGAN_COLUMNS
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in log:
            w.writerow([row["iteration"]] + [repr(float(row[c])) for c in cols[1:]])


def read_metric_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


# -- training -------------------------------------------------------------------


def _optim_state(opt: torch.optim.Optimizer) -> dict:
    sd = opt.state_dict()
    return {"state": {i: {k: (v.detach().clone() if isinstance(v, torch.Tensor) else v) for k, v in s.items()}
                      for i, s in sd["state"].items()},
            "param_groups": json.loads(json.dumps(sd["param_groups"]))}


class _Trainer:
    columns: tuple[str, ...]

    def __init__(self, cfg: TrainConfig, run_dir=None, resume: Checkpoint | None = None):
        self.cfg = cfg
        self.dtype = cfg.torch_dtype
        self.run_dir = None if run_dir is None else Path(run_dir)
        self.nets = self.make_nets()
        self.optims = self.make_optims()
        self.buffers: dict[str, HistoryBuffer] = {}
        self.log: list[dict] = []
        self.iteration = 0
        self.epoch = 0
        self.setup()
        if resume is not None:
            self.restore(resume)

    def _build(self, spec: NetSpec, seed_offset: int) -> NetHandle:
        return build(spec, seed=self.cfg.seed * 1000 + seed_offset).to(self.dtype)

    def _adam(self, *handles: NetHandle):
        params = [p for h in handles for p in h.module.parameters()]
        return torch.optim.Adam(params, lr=self.cfg.learning_rate, betas=(self.cfg.adam_beta1, self.cfg.adam_beta2))

    def setup(self):
        pass

    def restore(self, ckpt: Checkpoint):
        if ckpt.config.model != self.cfg.model:
            raise InvalidArgument("checkpoint belongs to a different model")
        for name, h in ckpt.nets.items():
            self.nets[name].load_arrays(h.named_arrays())
        for name, sd in ckpt.optim_state.items():
            self.optims[name].load_state_dict({"state": sd["state"], "param_groups": sd["param_groups"]})
        for name, (rng_state, pool) in ckpt.buffer_state.items():
            self.buffers[name].restore(rng_state, pool)
        self.log = [dict(r) for r in ckpt.metric_log]
        self.iteration, self.epoch = ckpt.iteration, ckpt.epoch

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            nets=self.nets,
            config=self.cfg,
            epoch=self.epoch,
            iteration=self.iteration,
            metric_log=list(self.log),
            optim_state={k: _optim_state(o) for k, o in self.optims.items()},
            buffer_state={k: b.state() for k, b in self.buffers.items()},
        )

    def tensor(self, arrays) -> torch.Tensor:
        return torch.from_numpy(np.stack(arrays)).to(self.dtype)

    def check_finite(self, values: dict):
        if not all(math.isfinite(v) for v in values.values()):
            raise DivergenceDetected(self.iteration, values)

    def iterations_per_epoch(self) -> int:
        raise NotImplementedError

    def step(self, epoch_index: int, j: int) -> dict:
        raise NotImplementedError

    def run(self, max_iterations: int | None = None) -> Checkpoint:
        per_epoch = self.iterations_per_epoch()
        total = self.cfg.epochs * per_epoch
        if max_iterations is not None:
            total = min(total, max_iterations)
        while self.iteration < total:
            e, j = divmod(self.iteration, per_epoch)
            row = self.step(e, j)
            row = {"iteration": self.iteration, **row}
            self.log.append(row)
            self.iteration += 1
            if self.iteration % per_epoch == 0:
                self.epoch = self.iteration // per_epoch
                if self.run_dir is not None:
                    self.checkpoint().save(self.run_dir / f"epoch_{self.epoch:03d}")
        ckpt = self.checkpoint()
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.json").write_text(json.dumps(asdict(self.cfg), indent=2, sort_keys=True))
            write_metric_log(self.log, self.run_dir / "metrics.csv", self.cfg.model)
        return ckpt


class CycleGANTrainer(_Trainer):
    """G_B maps noisy (A) to clean (B); G_A maps clean back to noisy.

    D_A judges domain A images, D_B judges domain B images.
    """

    columns = CYCLEGAN_COLUMNS

    def __init__(self, manifest: DatasetManifest, cfg: TrainConfig, run_dir=None, resume=None):
        if manifest.pairing != "unpaired":
            raise InvalidArgument("CycleGAN training takes an unpaired manifest")
        if cfg.model != "cyclegan":
            raise InvalidArgument("config model must be cyclegan")
        self.noisy = _load_signed(manifest.noisy_pool(), cfg.channels)
        self.clean = _load_signed(manifest.clean_pool(), cfg.channels)
        if not self.noisy or not self.clean:
            raise InvalidArgument("both pools must be nonempty")
        super().__init__(cfg, run_dir, resume)

    def make_nets(self):
        c = self.cfg
        g = NetSpec("cycle_generator", c.base_width, c.res_blocks, c.channels, c.channels)
        d = NetSpec("patch_discriminator", c.base_width, input_channels=c.channels)
        return {"G_A": self._build(g, 1), "G_B": self._build(g, 2),
                "D_A": self._build(d, 3), "D_B": self._build(d, 4)}

    def make_optims(self):
        n = self.nets
        return {"G": self._adam(n["G_A"], n["G_B"]), "D_A": self._adam(n["D_A"]), "D_B": self._adam(n["D_B"])}

    def setup(self):
        cap, seed = self.cfg.buffer_capacity, self.cfg.seed
        self.buffers = {"A": HistoryBuffer(cap, np.random.SeedSequence([seed, 21])),
                        "B": HistoryBuffer(cap, np.random.SeedSequence([seed, 22]))}

    def iterations_per_epoch(self):
        return math.ceil(max(len(self.noisy), len(self.clean)) / self.cfg.batch_size)

    def batch(self, e, j):
        bs, seed = self.cfg.batch_size, self.cfg.seed
        big, small = (self.noisy, self.clean) if len(self.noisy) >= len(self.clean) else (self.clean, self.noisy)
        perm = np.random.default_rng([seed, 11, e]).permutation(len(big))
        big_idx = perm[j * bs:(j + 1) * bs]
        small_idx = np.random.default_rng([seed, 12, self.iteration]).integers(len(small), size=len(big_idx))
        crop_rng = np.random.default_rng([seed, 13, self.iteration])
        xs = [_crop(big[i], self.cfg.patch_size, crop_rng)[0] for i in big_idx]
        ys = [_crop(small[i], self.cfg.patch_size, crop_rng)[0] for i in small_idx]
        if big is not self.noisy:
            xs, ys = ys, xs
        return self.tensor(xs), self.tensor(ys)

    def step(self, e, j):
        n, o, lam = self.nets, self.optims, self.cfg.cycle_weight
        x, y = self.batch(e, j)
        for d in ("D_A", "D_B"):
            n[d].module.requires_grad_(False)
        out_b = n["G_B"](x)
        rec_a = n["G_A"](out_b)
        out_a = n["G_A"](y)
        rec_b = n["G_B"](out_a)
        adv = L.lsgan_g_loss(n["D_B"](out_b)) + L.lsgan_g_loss(n["D_A"](out_a))
        cyc = L.cycle_loss(x, rec_a) + L.cycle_loss(y, rec_b)
        loss_g = adv + lam * cyc
        self.check_finite({"loss_g": loss_g.item(), "loss_cycle": cyc.item()})
        o["G"].zero_grad(set_to_none=True)
        loss_g.backward()
        o["G"].step()

        for d in ("D_A", "D_B"):
            n[d].module.requires_grad_(True)
        fake_a = self.buffers["A"].query(out_a.detach())
        loss_da = L.lsgan_d_loss(n["D_A"](x), n["D_A"](fake_a))
        self.check_finite({"loss_d_a": loss_da.item()})
        o["D_A"].zero_grad(set_to_none=True)
        loss_da.backward()
        o["D_A"].step()

        fake_b = self.buffers["B"].query(out_b.detach())
        loss_db = L.lsgan_d_loss(n["D_B"](y), n["D_B"](fake_b))
        self.check_finite({"loss_d_b": loss_db.item()})
        o["D_B"].zero_grad(set_to_none=True)
        loss_db.backward()
        o["D_B"].step()
        return {"loss_g": loss_g.item(), "loss_d_a": loss_da.item(), "loss_d_b": loss_db.item(),
                "loss_cycle": cyc.item()}


class CGANTrainer(_Trainer):
    columns = CGAN_COLUMNS

    def __init__(self, manifest: DatasetManifest, cfg: TrainConfig, run_dir=None, resume=None, extractor=None):
        if manifest.pairing != "paired":
            raise InvalidArgument("conditional GAN training takes a paired manifest (synthesize with dataset.pairing=paired)")
        if cfg.model != "cgan":
            raise InvalidArgument("config model must be cgan")
        pairs = manifest.pairs()
        self.noisy = _load_signed([p[0] for p in pairs], cfg.channels)
        self.clean = _load_signed([p[1] for p in pairs], cfg.channels)
        if not self.noisy:
            raise InvalidArgument("manifest is empty")
        self.extractor = (extractor or L.FeaturePyramid(cfg.channels)).to(cfg.torch_dtype)
        super().__init__(cfg, run_dir, resume)

    def make_nets(self):
        c = self.cfg
        g = NetSpec("cgan_generator", c.base_width, input_channels=c.channels, output_channels=c.channels,
                    depth=c.cgan_depth)
        d = NetSpec("cgan_discriminator", c.base_width, input_channels=c.channels)
        return {"G": self._build(g, 1), "D": self._build(d, 2)}

    def make_optims(self):
        return {"G": self._adam(self.nets["G"]), "D": self._adam(self.nets["D"])}

    def iterations_per_epoch(self):
        return math.ceil(len(self.noisy) / self.cfg.batch_size)

    def batch(self, e, j):
        bs, seed = self.cfg.batch_size, self.cfg.seed
        idx = np.random.default_rng([seed, 11, e]).permutation(len(self.noisy))[j * bs:(j + 1) * bs]
        crop_rng = np.random.default_rng([seed, 13, self.iteration])
        xs, ys = [], []
        for i in idx:
            xc, off = _crop(self.noisy[i], self.cfg.patch_size, crop_rng)
            yc, _ = _crop(self.clean[i], self.cfg.patch_size, crop_rng, off)
            xs.append(xc)
            ys.append(yc)
        return self.tensor(xs), self.tensor(ys)

    def step(self, e, j):
        n, o, w = self.nets, self.optims, self.cfg.weights()
        x, y = self.batch(e, j)
        n["D"].module.requires_grad_(False)
        fake = n["G"](x)
        adv = L.lsgan_g_loss(n["D"](torch.cat([x, fake], 1)))
        perc = L.perceptual_loss(fake, y, self.extractor)
        loss_g = L.cgan_total_g_loss(adv, perc, w)
        self.check_finite({"loss_g_adv": adv.item(), "loss_g_perc": perc.item()})
        o["G"].zero_grad(set_to_none=True)
        loss_g.backward()
        o["G"].step()

        n["D"].module.requires_grad_(True)
        loss_d = L.lsgan_d_loss(n["D"](torch.cat([x, y], 1)), n["D"](torch.cat([x, fake.detach()], 1)))
        self.check_finite({"loss_d": loss_d.item()})
        o["D"].zero_grad(set_to_none=True)
        loss_d.backward()
        o["D"].step()
        return {"loss_g_adv": adv.item(), "loss_g_perc": perc.item(), "loss_d": loss_d.item()}


def train_cyclegan(manifest: DatasetManifest, cfg: TrainConfig, run_dir=None,
                   resume: Checkpoint | None = None, max_iterations: int | None = None) -> Checkpoint:
    """Train G_A, G_B, D_A, D_B on unpaired noisy/clean pools.

    With ``run_dir`` set, a checkpoint is written to ``run_dir/epoch_NNN/``
    after every epoch. ``resume`` continues from a saved checkpoint.
    """
    return CycleGANTrainer(manifest, cfg, run_dir, resume).run(max_iterations)


def train_cgan(manifest: DatasetManifest, cfg: TrainConfig, run_dir=None,
               resume: Checkpoint | None = None, max_iterations: int | None = None) -> Checkpoint:
    return CGANTrainer(manifest, cfg, run_dir, resume).run(max_iterations)


# -- inference --------------------------------------------------------------------


def tile_plan(height: int, width: int, patch: int, overlap: float = 0.25) -> list[tuple[int, int]]:
    stride = max(1, patch - int(patch * overlap))
    return [(y, x) for y in window_origins(height, patch, stride) for x in window_origins(width, patch, stride)]


def feather(patch: int, overlap: float = 0.25) -> np.ndarray:
    """Strictly positive 2-D weight window ramping linearly up from each edge."""
    ramp = max(1, int(patch * overlap))
    i = np.arange(patch)
    w = np.minimum(np.minimum(i + 1, patch - i), ramp + 1) / (ramp + 1)
    return np.outer(w, w)


def blend_weight_sum(height: int, width: int, patch: int, overlap: float = 0.25) -> np.ndarray:
    """Normalized blending weights accumulated over the tile plan (all ones on a covered page)."""
    w = feather(patch, overlap)
    acc = np.zeros((height, width))
    for y, x in tile_plan(height, width, patch, overlap):
        acc[y:y + patch, x:x + patch] += w
    norm = np.zeros((height, width))
    for y, x in tile_plan(height, width, patch, overlap):
        norm[y:y + patch, x:x + patch] += w / acc[y:y + patch, x:x + patch]
    return norm


def clean_image(img: ImageTensor, ckpt: Checkpoint, overlap: float = 0.25) -> ImageTensor:
    """Run the noisy-to-clean generator over ``img`` and return a uint8 image.

    Pages larger than the training patch are tiled with feathered blending;
    smaller sides are reflect-padded to the patch size and cropped back.
    """
    gen = ckpt.generator
    patch = ckpt.config.patch_size
    dtype = next(gen.module.parameters()).dtype
    h, w = img.height, img.width
    arr = _pad_to(normalize(img, "signed").as_float().transpose(2, 0, 1), patch)
    _, ph, pw = arr.shape
    weight = feather(patch, overlap)
    acc = np.zeros_like(arr)
    norm = np.zeros((ph, pw))
    gen.module.eval()
    with torch.no_grad():
        for y, x in tile_plan(ph, pw, patch, overlap):
            tile = torch.from_numpy(np.ascontiguousarray(arr[None, :, y:y + patch, x:x + patch])).to(dtype)
            out = gen(tile)[0].to(torch.float64).numpy()
            acc[:, y:y + patch, x:x + patch] += out * weight
            norm[y:y + patch, x:x + patch] += weight
    gen.module.train()
    out = (acc / norm)[:, :h, :w].transpose(1, 2, 0)
    return normalize(ImageTensor(np.clip(out, -1.0, 1.0), "signed"), "uint8")
