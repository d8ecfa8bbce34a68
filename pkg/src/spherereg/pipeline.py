"""End-to-end orchestration: feature preprocessing, synthetic pair
generation, autoencoder pretraining, per-stage training with best-validation
checkpointing, and serial coarse-to-fine registration."""

from __future__ import annotations

import configparser
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conv import DEFAULT_KERNELS, FcbBlock, MoNetLayer, NetConfig, \
    RegistrationNet, pseudo_coords, tape_upsample
from .crf import CrfConfig, crf_forward_tensor, init_crf_params
from .mesh import SphericalFeatureMap, build_icosphere, read_sfm, vertex_count
from .metrics import LossWeights, cc_similarity, total_loss
from .optim import ParamStore
from .warp import DeformationField, build_label_space, compose, control_grid, \
    read_def, resample_moving, resample_tensor, soft_deform_tensor, \
    upsample_deformation_tensor

CLIP_SD = 2.0


# -- preprocessing ---------------------------------------------------------

def normalize_features(fmap: SphericalFeatureMap) -> SphericalFeatureMap:
    """Per-channel standardization over unmasked vertices, clipped to
    +-2 standard deviations; masked vertices are zeroed."""
    valid = fmap.valid_mask()
    if valid.sum() < 2:
        raise ValueError("need at least 2 unmasked vertices to normalize")
    out = np.zeros_like(fmap.values)
    for ch in range(fmap.channels):
        col = fmap.values[valid, ch]
        sd = col.std()
        if sd < 1e-12:
            warnings.warn(f"constant channel {ch} left at zero")
            continue
        out[valid, ch] = np.clip((col - col.mean()) / sd, -CLIP_SD, CLIP_SD)
    return SphericalFeatureMap(fmap.sphere_order, out,
                               None if fmap.mask is None else fmap.mask.copy())


def histogram_match(source: SphericalFeatureMap,
                    reference: SphericalFeatureMap) -> SphericalFeatureMap:
    """Monotone rank-based remap of each source channel onto the reference
    empirical distribution (linear interpolation between order statistics)."""
    if source.channels != reference.channels:
        raise ValueError("channel count mismatch")
    src_valid = source.valid_mask()
    ref_valid = reference.valid_mask()
    out = source.values.copy()
    for ch in range(source.channels):
        s = source.values[src_valid, ch]
        r = np.sort(reference.values[ref_valid, ch])
        ranks = np.argsort(np.argsort(s, kind="stable"), kind="stable")
        # rank i of n maps onto the reference order statistics so that
        # equal-sized identical distributions are reproduced exactly
        pos = ranks * (len(r) - 1) / max(len(s) - 1, 1)
        out[src_valid, ch] = np.interp(pos, np.arange(len(r)), r)
    return SphericalFeatureMap(source.sphere_order, out,
                               None if source.mask is None
                               else source.mask.copy())


# -- synthetic data --------------------------------------------------------

@dataclass
class SyntheticWarpSpec:
    """Random localized-rotation warp plus band-limited feature field."""

    n_components: int = 8
    max_angle: float = 0.55  # max displacement in radians
    smoothness: float = 1.2  # angular scale of the rotation bumps
    field_degree: int = 6
    n_channels: int = 1
    noise: float = 0.0
    seed: int = 0
    max_retries: int = 20

    def __post_init__(self):
        if self.max_angle < 0 or self.smoothness <= 0:
            raise ValueError("bad warp amplitude or smoothness")
        if self.n_components < 0 or self.max_retries < 1:
            raise ValueError("bad component or retry count")


def _rotation_matrix(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def _random_field(points: np.ndarray, rng: np.random.Generator,
                  degree: int, n_channels: int) -> np.ndarray:
    """Band-limited smooth scalar fields: random plane-wave-like products
    cos(k.p + phase) with |k| up to ``degree``, standardized per channel."""
    out = np.zeros((len(points), n_channels))
    for ch in range(n_channels):
        for _ in range(3 * degree):
            k = rng.standard_normal(3)
            k *= rng.uniform(1.0, degree) / np.linalg.norm(k)
            phase = rng.uniform(0, 2 * np.pi)
            out[:, ch] += rng.standard_normal() * np.cos(points @ k + phase)
        out[:, ch] -= out[:, ch].mean()
        out[:, ch] /= out[:, ch].std()
    return out


def _random_warp(points: np.ndarray, spec: SyntheticWarpSpec,
                 rng: np.random.Generator) -> np.ndarray:
    """Compose localized rotations: each component rotates by an angle that
    decays as a Gaussian bump of geodesic distance from a random center."""
    moved = points.copy()
    for _ in range(spec.n_components):
        axis = rng.standard_normal(3)
        center = rng.standard_normal(3)
        center /= np.linalg.norm(center)
        peak = rng.uniform(0.5, 1.0) * spec.max_angle
        geo = np.arccos(np.clip(moved @ center, -1.0, 1.0))
        angles = peak * np.exp(-(geo**2) / (2 * spec.smoothness**2))
        # small per-vertex rotations about a shared axis
        axis = axis / np.linalg.norm(axis)
        k = np.cross(np.broadcast_to(axis, moved.shape), moved)
        cos_a = np.cos(angles)[:, None]
        sin_a = np.sin(angles)[:, None]
        moved = cos_a * moved - sin_a * k + \
            (1 - cos_a) * (moved @ axis)[:, None] * axis
        moved /= np.linalg.norm(moved, axis=1, keepdims=True)
    return moved


def generate_synthetic_pair(spec: SyntheticWarpSpec, order: int):
    """A (moving, fixed, ground-truth warp) triple.

    The moving map samples an analytic band-limited field; the fixed map is
    the moving map resampled through the truth warp, so registering with
    the ground-truth deformation reproduces the fixed map exactly (same
    deterministic resampling path).  Warps that flip any face are rejected
    and regenerated.
    """
    if order > 6:
        raise ValueError("synthetic generation is limited to order <= 6")
    from .metrics import distortion_stats

    rng = np.random.Generator(np.random.Philox(spec.seed))
    sphere = build_icosphere(order)
    values = _random_field(sphere.vertices, rng, spec.field_degree,
                           spec.n_channels)
    moving = SphericalFeatureMap(order, values)

    for _ in range(spec.max_retries):
        endpoints = _random_warp(sphere.vertices, spec, rng)
        truth = DeformationField(order, endpoints)
        stats = distortion_stats(sphere, truth)
        if stats.flipped_faces == 0 and stats.degenerate_faces == 0:
            break
    else:
        raise RuntimeError("could not generate an orientation-preserving warp")

    if spec.n_components == 0 or spec.max_angle == 0.0:
        fixed_vals = values.copy()
    else:
        fixed_vals = resample_moving(moving, truth, sphere).values
    if spec.noise > 0:
        fixed_vals = fixed_vals + spec.noise * rng.standard_normal(
            fixed_vals.shape)
    fixed = SphericalFeatureMap(order, fixed_vals)
    return moving, fixed, truth


# -- autoencoder pretraining -----------------------------------------------

class Autoencoder:
    """Encoder of stacked feature convolution blocks with a mirrored
    decoder (upsample + convolution per stage, reversed channel widths)."""

    def __init__(self, store: ParamStore, cfg: NetConfig, rng,
                 prefix: str = "ae"):
        self.cfg = cfg
        self.prefix = prefix
        self.enc = []
        c_in = cfg.in_channels
        order = cfg.input_order
        for i, c_blk in enumerate(cfg.fcb_channels):
            self.enc.append(FcbBlock(store, f"{prefix}.b{i}", order, c_in,
                                     c_blk, cfg.in_channels, c_blk, "A",
                                     cfg.n_kernels, rng))
            c_in = c_blk
            order -= 1
        self.dec = []
        widths = (list(cfg.fcb_channels[:-1])[::-1] + [cfg.in_channels])
        for i, c_out in enumerate(widths):
            order += 1
            self.dec.append(MoNetLayer(store, f"{prefix}.d{i}", c_in, c_out,
                                       cfg.n_kernels,
                                       pseudo_coords(order).box, rng))
            c_in = c_out

    def encode(self, values: np.ndarray) -> Tensor:
        from .mesh import downsample_features

        raw = SphericalFeatureMap(self.cfg.input_order, np.asarray(values))
        out = ad.constant(raw.values)
        for block in self.enc:
            raw = downsample_features(raw)
            out = block.forward(out, ad.constant(raw.values))
        return out

    def forward(self, values: np.ndarray) -> Tensor:
        x = self.encode(values)
        order = self.cfg.latent_order
        for i, layer in enumerate(self.dec):
            x = tape_upsample(x, order)
            order += 1
            x = layer.forward(pseudo_coords(order), x)
            if i < len(self.dec) - 1:
                x = ad.leaky_relu(x)
        return x


def pretrain_autoencoder(values_list, cfg: NetConfig, seed: int,
                         epochs: int = 5, lr: float = 1e-3):
    """Train the mirrored autoencoder on raw feature maps.

    Returns the parameter store and the per-epoch mean reconstruction MSE.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    store = ParamStore()
    ae = Autoencoder(store, cfg, rng)
    trace = []
    order_rng = np.random.Generator(np.random.Philox(seed + 1))
    for _ in range(epochs):
        losses = []
        for i in order_rng.permutation(len(values_list)):
            vals = values_list[i]
            recon = ae.forward(vals)
            diff = recon - vals
            loss = ad.mean_(diff * diff)
            if not np.isfinite(loss.value):
                raise FloatingPointError("autoencoder reconstruction diverged")
            store.zero_grad()
            loss.backward()
            store.adam_step(lr)
            losses.append(float(loss.value))
        trace.append(float(np.mean(losses)))
    return store, trace


def transfer_encoder(ae_store: ParamStore, net_store: ParamStore,
                     cfg: NetConfig, prefix: str = "fx") -> int:
    """Copy pretrained encoder blocks into every extractor path; returns
    the number of parameter blocks transferred."""
    n = len(cfg.fcb_channels)
    moved = 0
    for i in range(n):
        tags = ["s"] if i >= n - cfg.shared_fcbs else ["m", "f"]
        for tag in tags:
            for suffix in ("conv1", "conv2", "gate"):
                for leaf in ("mu", "lraw", "g", "b"):
                    src = f"ae.b{i}.{suffix}.{leaf}"
                    dst = f"{prefix}.{tag}.b{i}.{suffix}.{leaf}"
                    if src in ae_store and dst in net_store:
                        net_store[dst].value = ae_store[src].value.copy()
                        moved += 1
    return moved


# -- stage configuration ---------------------------------------------------

@dataclass
class StageConfig:
    """One registration stage: architecture, loss, and optimizer settings."""

    input_order: int
    control_order: int
    label_order: int
    n_labels: int
    fcb_channels: tuple
    res_channels: tuple
    in_channels: int = 1
    n_kernels: int = DEFAULT_KERNELS
    shared_fcbs: int = 2
    gamma: float = 0.2
    lam_sm: float = 0.1
    lr: float = 1e-3
    epochs: int = 20
    deform_mode: str = "soft"
    use_crf: bool = True
    crf_iterations: int = 5
    refine_steps: int = 0
    refine_lr: float = 1e-2
    r: int = 0  # opaque; stored and logged only

    def __post_init__(self):
        if self.deform_mode not in ("soft", "argmax"):
            raise ValueError(f"unknown deform_mode {self.deform_mode!r}")
        self.net_config()  # validate architecture consistency

    def net_config(self) -> NetConfig:
        return NetConfig(
            input_order=self.input_order,
            in_channels=self.in_channels,
            fcb_channels=tuple(self.fcb_channels),
            res_channels=tuple(self.res_channels),
            control_order=self.control_order,
            label_order=self.label_order,
            n_labels=self.n_labels,
            n_kernels=self.n_kernels,
            shared_fcbs=self.shared_fcbs,
        )

    def crf_config(self) -> CrfConfig:
        return CrfConfig(iterations=self.crf_iterations, gamma=self.gamma)


def desk_scale_stages(in_channels: int = 1, use_crf: bool = True):
    """Default two-stage configuration for order-4 synthetic cohorts.

    The coarse stage has a wide label reach for gross alignment; the fine
    stage polishes residuals on a denser control grid.  Registration-time
    instance refinement does the per-pair fitting, so the amortized
    training epochs stay short.
    """
    coarse = StageConfig(
        input_order=4, control_order=1, label_order=3, n_labels=80,
        fcb_channels=(8, 8, 16), res_channels=(16, 16, 80),
        in_channels=in_channels, lam_sm=0.9, lr=3e-3, epochs=3,
        refine_steps=150, refine_lr=3e-2, use_crf=use_crf,
    )
    fine = StageConfig(
        input_order=4, control_order=2, label_order=4, n_labels=16,
        fcb_channels=(8, 16), res_channels=(16, 16),
        in_channels=in_channels, lam_sm=1.2, lr=3e-3, epochs=2,
        refine_steps=40, refine_lr=1e-2, use_crf=use_crf,
    )
    return [coarse, fine]


# -- stage model -----------------------------------------------------------

class StageModel:
    """A registration network plus label space and optional CRF, bound to
    one parameter store."""

    def __init__(self, stage: StageConfig, store: ParamStore | None = None,
                 seed: int = 0):
        self.stage = stage
        self.store = store if store is not None else ParamStore()
        rng = np.random.Generator(np.random.Philox(seed))
        self.net = RegistrationNet(self.store, stage.net_config(), rng)
        self.labels = build_label_space(control_grid(stage.control_order),
                                        stage.label_order, stage.n_labels)
        self._refined_logits = None
        if stage.use_crf and "crf.omega" not in self.store:
            init_crf_params(self.store, stage.control_order, stage.n_labels)
        if stage.use_crf:
            # the head stays a genuine smoother: jointly trained filter
            # weights and compatibilities drift until the classifier cancels
            # the regularization
            self.store.freeze("crf.omega", "crf.mu")

    def _endpoints_from_logits(self, logits: Tensor) -> Tensor:
        if self.stage.use_crf:
            _, endpoints = crf_forward_tensor(
                logits, self.labels, self.store["crf.omega"],
                self.store["crf.mu"], self.stage.crf_config())
            return endpoints
        q = ad.softmax_rows(logits)
        return soft_deform_tensor(self.labels, q)

    def control_endpoints(self, moving_vals, fixed_vals) -> Tensor:
        if self._refined_logits is not None:
            logits = ad.constant(self._refined_logits)
        else:
            logits = self.net.logits(moving_vals, fixed_vals)
        return self._endpoints_from_logits(logits)

    def full_endpoints(self, moving_vals, fixed_vals) -> Tensor:
        coarse = self.control_endpoints(moving_vals, fixed_vals)
        return upsample_deformation_tensor(coarse, self.stage.control_order,
                                           self.stage.input_order)

    def pair_loss(self, moving: SphericalFeatureMap,
                  fixed: SphericalFeatureMap) -> Tensor:
        endpoints = self.full_endpoints(moving.values, fixed.values)
        warped = resample_tensor(moving.values, endpoints,
                                 self.stage.input_order)
        weights = LossWeights(sim=1.0, smooth=self.stage.lam_sm)
        return total_loss(fixed, warped, endpoints, self.stage.input_order,
                          weights, moving.mask)

    def register(self, moving: SphericalFeatureMap,
                 fixed: SphericalFeatureMap):
        """Deformation field and warped moving map (no tape)."""
        endpoints = self.full_endpoints(moving.values, fixed.values)
        field_ = DeformationField(self.stage.input_order, endpoints.value)
        sphere = build_icosphere(self.stage.input_order)
        warped = resample_moving(moving, field_, sphere)
        return field_, warped

    def refine(self, moving: SphericalFeatureMap,
               fixed: SphericalFeatureMap) -> None:
        """Instance refinement: optimize this pair's control-point label
        scores directly, starting from the network's prediction.

        Only the logits move; the networks and the pairwise regularizer
        stay frozen, so the regularization is not optimized away and no
        convolution passes are needed inside the loop.
        """
        if self.stage.refine_steps <= 0:
            return
        init = self.net.logits(moving.values, fixed.values).value
        # keep the network's label ranking but reset its confidence: a
        # saturated softmax leaves the optimizer with vanishing gradients
        init = init - init.mean(axis=1, keepdims=True)
        rms = float(np.sqrt((init**2).mean()))
        if rms > 1e-6:
            init = init / rms
        opt = ParamStore()
        logits = opt.add("logits", init.copy())
        weights = LossWeights(sim=1.0, smooth=self.stage.lam_sm)
        for _ in range(self.stage.refine_steps):
            opt.zero_grad()
            # refinement optimizes the plain unary posterior; the CRF head
            # (when enabled) regularizes the result at inference time
            coarse = soft_deform_tensor(self.labels, ad.softmax_rows(logits))
            endpoints = upsample_deformation_tensor(
                coarse, self.stage.control_order, self.stage.input_order)
            warped = resample_tensor(moving.values, endpoints,
                                     self.stage.input_order)
            loss = total_loss(fixed, warped, endpoints,
                              self.stage.input_order, weights, moving.mask)
            if not np.isfinite(loss.value):
                raise FloatingPointError("non-finite refinement loss")
            loss.backward()
            opt.adam_step(self.stage.refine_lr)
        self._refined_logits = logits.value.copy()


# -- dataset plumbing ------------------------------------------------------

@dataclass
class PairEntry:
    moving_path: str
    fixed_path: str
    truth_path: str | None = None


def write_manifest(path, entries) -> None:
    with open(path, "w") as fh:
        for e in entries:
            line = f"{e.moving_path} {e.fixed_path}"
            if e.truth_path:
                line += f" {e.truth_path}"
            fh.write(line + "\n")


def read_manifest(path):
    entries = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (2, 3):
                raise ValueError(f"{path}:{ln}: expected 2 or 3 fields")
            entries.append(PairEntry(parts[0], parts[1],
                                     parts[2] if len(parts) == 3 else None))
    return entries


def load_pair(entry: PairEntry):
    moving = read_sfm(entry.moving_path)
    fixed = read_sfm(entry.fixed_path)
    truth = read_def(entry.truth_path) if entry.truth_path else None
    return moving, fixed, truth


def split_indices(n: int, seed: int, ratios=(0.8, 0.1, 0.1)):
    """Deterministic train/validation/test split of ``n`` items."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    order = np.random.Generator(np.random.Philox(seed)).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    return (order[:n_train], order[n_train:n_train + n_val],
            order[n_train + n_val:])


# -- training --------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_cc: float


def _validation_cc(model: StageModel, pairs) -> float:
    scores = []
    for moving, fixed in pairs:
        _, warped = model.register(moving, fixed)
        _, mean = cc_similarity(fixed, warped, warped.mask)
        scores.append(mean)
    return float(np.mean(scores)) if scores else float("nan")


def train_stage(stage: StageConfig, train_pairs, val_pairs, seed: int,
                init_store: ParamStore | None = None, log=None):
    """Train one stage with per-epoch shuffling and best-validation
    checkpointing.  Returns (best parameter store, epoch trace)."""
    model = StageModel(stage, seed=seed)
    if init_store is not None:
        model.store.load_values(init_store)
    shuffle_rng = np.random.Generator(np.random.Philox(seed + 1))
    best_store = model.store.copy()
    best_cc = -np.inf
    trace = []
    for epoch in range(stage.epochs):
        losses = []
        for i in shuffle_rng.permutation(len(train_pairs)):
            moving, fixed = train_pairs[i]
            model.store.zero_grad()
            loss = model.pair_loss(moving, fixed)
            if not np.isfinite(loss.value):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}")
            loss.backward()
            model.store.adam_step(stage.lr)
            losses.append(float(loss.value))
        val_cc = _validation_cc(model, val_pairs)
        record = EpochRecord(epoch, float(np.mean(losses)), val_cc)
        trace.append(record)
        if log is not None:
            log(record)
        if val_cc > best_cc:
            best_cc = val_cc
            best_store = model.store.copy()
    return best_store, trace


def warp_pairs(stage: StageConfig, store: ParamStore, pairs, seed: int = 0):
    """Replace each pair's moving map by its registration through a trained
    stage (the hand-off between serial stages)."""
    model = StageModel(stage, seed=seed)
    model.store.load_values(store)
    out = []
    for moving, fixed in pairs:
        _, warped = model.register(moving, fixed)
        out.append((warped, fixed))
    return out


def register_pair(stages, moving: SphericalFeatureMap,
                  fixed: SphericalFeatureMap):
    """Apply trained stages serially, composing the deformations.

    ``stages`` is a list of (StageConfig, ParamStore).  Returns the
    composed DeformationField, the final warped map, and the metrics dict.
    """
    from .metrics import distortion_stats, metrics_report

    if not stages:
        raise ValueError("need at least one trained stage")
    current = moving
    field_ = None
    for stage, store in stages:
        if stage.input_order != moving.sphere_order:
            raise ValueError(
                f"stage expects order {stage.input_order}, "
                f"data is order {moving.sphere_order}")
        model = StageModel(stage, seed=0)
        model.store.load_values(store)
        if stage.refine_steps > 0:
            model.refine(current, fixed)
        step_field, current = model.register(current, fixed)
        field_ = step_field if field_ is None else compose(field_, step_field)
    sphere = build_icosphere(moving.sphere_order)
    stats = distortion_stats(sphere, field_)
    report = metrics_report(fixed, current, stats)
    return field_, current, report


# -- run configuration -----------------------------------------------------

@dataclass
class RunConfig:
    manifest: str
    seed: int
    stages: list = field(default_factory=list)
    ratios: tuple = (0.8, 0.1, 0.1)
    pretrain_epochs: int = 0


def _parse_int_tuple(text: str) -> tuple:
    return tuple(int(x) for x in text.split(","))


def read_run_config(path) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    read = cp.read(path)
    if not read:
        raise ValueError(f"cannot read run config {path}")
    if "data" not in cp:
        raise ValueError(f"{path}: missing [data] section")
    data = cp["data"]
    for key in ("manifest", "seed"):
        if key not in data:
            raise ValueError(f"{path}: missing data.{key}")
    crf_defaults = cp["crf"] if "crf" in cp else {}
    stages = []
    for n in (1, 2):
        name = f"stage.{n}"
        if name not in cp:
            continue
        s = cp[name]
        try:
            stages.append(StageConfig(
                input_order=s.getint("input_order"),
                control_order=s.getint("control_order"),
                label_order=s.getint("label_order"),
                n_labels=s.getint("n_labels"),
                fcb_channels=_parse_int_tuple(s["fcb_channels"]),
                res_channels=_parse_int_tuple(s["res_channels"]),
                in_channels=s.getint("in_channels", 1),
                n_kernels=s.getint("n_kernels", DEFAULT_KERNELS),
                shared_fcbs=s.getint("shared_fcbs", 2),
                gamma=s.getfloat("gamma",
                                 float(crf_defaults.get("gamma", 0.2))),
                lam_sm=s.getfloat("lam_sm", 0.1),
                lr=s.getfloat("lr", 1e-3),
                epochs=s.getint("epochs", 20),
                deform_mode=s.get("deform_mode", "soft"),
                use_crf=s.getboolean("crf",
                                     str(crf_defaults.get("enabled",
                                                          "true")) == "true"),
                crf_iterations=s.getint(
                    "crf_iterations", int(crf_defaults.get("iterations", 5))),
                refine_steps=s.getint("refine_steps", 0),
                refine_lr=s.getfloat("refine_lr", 1e-2),
                r=s.getint("r", 0),
            ))
        except (KeyError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}: bad {name} config: {exc}") from exc
    if not stages:
        raise ValueError(f"{path}: no [stage.N] sections")
    ratios = (0.8, 0.1, 0.1)
    if "split" in data:
        ratios = tuple(float(x) for x in data["split"].split(","))
    return RunConfig(
        manifest=data["manifest"],
        seed=data.getint("seed"),
        stages=stages,
        ratios=ratios,
        pretrain_epochs=data.getint("pretrain_epochs", 0),
    )


_STAGE_CFG_FIELDS = ("gamma", "lam_sm", "lr", "epochs", "deform_mode",
                     "crf_iterations", "refine_steps", "refine_lr", "r")


def write_stage_cfg(path, stage: StageConfig) -> None:
    """Persist the loss/optimizer settings that the architecture file does
    not carry (needed to refine at registration time)."""
    cp = configparser.ConfigParser()
    cp["stage"] = {name: str(getattr(stage, name))
                   for name in _STAGE_CFG_FIELDS}
    with open(path, "w") as fh:
        cp.write(fh)


def apply_stage_cfg(path, stage: StageConfig) -> StageConfig:
    """Overlay persisted settings from ``path`` onto ``stage``."""
    cp = configparser.ConfigParser()
    if not cp.read(path) or "stage" not in cp:
        raise ValueError(f"cannot read stage config {path}")
    s = cp["stage"]
    return replace(
        stage,
        gamma=s.getfloat("gamma", stage.gamma),
        lam_sm=s.getfloat("lam_sm", stage.lam_sm),
        lr=s.getfloat("lr", stage.lr),
        epochs=s.getint("epochs", stage.epochs),
        deform_mode=s.get("deform_mode", stage.deform_mode),
        crf_iterations=s.getint("crf_iterations", stage.crf_iterations),
        refine_steps=s.getint("refine_steps", stage.refine_steps),
        refine_lr=s.getfloat("refine_lr", stage.refine_lr),
        r=s.getint("r", stage.r),
    )


def train_run(cfg: RunConfig, ckpt_dir, log=None):
    """Full training: load the manifest, split, optionally pretrain, train
    each stage serially, and write GMW1 checkpoints + CSV traces."""
    import os

    from .conv import write_arch
    from .optim import write_gmw

    entries = read_manifest(cfg.manifest)
    pairs = []
    for e in entries:
        moving, fixed, _ = load_pair(e)
        pairs.append((moving, fixed))
    tr, va, te = split_indices(len(pairs), cfg.seed, cfg.ratios)
    train_pairs = [pairs[i] for i in tr]
    val_pairs = [pairs[i] for i in va]

    os.makedirs(ckpt_dir, exist_ok=True)
    init_store = None
    if cfg.pretrain_epochs > 0 and train_pairs:
        values = [p[0].values for p in train_pairs] + \
            [p[1].values for p in train_pairs]
        ae_store, _ = pretrain_autoencoder(values, cfg.stages[0].net_config(),
                                           cfg.seed, cfg.pretrain_epochs)
        init_store = ParamStore()
        probe = StageModel(cfg.stages[0], store=init_store, seed=cfg.seed)
        transfer_encoder(ae_store, init_store, cfg.stages[0].net_config())
        del probe

    trained = []
    for k, stage in enumerate(cfg.stages, 1):
        store, trace = train_stage(stage, train_pairs, val_pairs, cfg.seed,
                                   init_store=init_store if k == 1 else None,
                                   log=log)
        write_gmw(os.path.join(ckpt_dir, f"stage{k}.gmw"), store)
        write_arch(os.path.join(ckpt_dir, f"stage{k}.arch"),
                   stage.net_config())
        write_stage_cfg(os.path.join(ckpt_dir, f"stage{k}.cfg"), stage)
        with open(os.path.join(ckpt_dir, f"stage{k}_trace.csv"), "w") as fh:
            fh.write("epoch,train_loss,val_cc\n")
            for rec in trace:
                fh.write(f"{rec.epoch},{rec.train_loss:.17g},"
                         f"{rec.val_cc:.17g}\n")
        trained.append((stage, store))
        if k < len(cfg.stages):
            train_pairs = warp_pairs(stage, store, train_pairs, cfg.seed)
            val_pairs = warp_pairs(stage, store, val_pairs, cfg.seed)
    return trained, (tr, va, te)
