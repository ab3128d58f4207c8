"""Under-reconstruction detection and inpainting-driven replenishment.

Novel views of an extracted target are scanned for regions the model
never learned (either by a denoiser-residual procedure or by a direct
alpha-coverage fallback), repaired by an external inpainting service,
and fed back as photometric-only training views.
"""

from __future__ import annotations

import base64
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np
import requests
from PIL import Image
from scipy import ndimage

from .camera import look_at
from .errors import DiskSplatError, InpaintServiceError
from .render import RenderOptions, render

DEFAULT_TIMESTEP = 991
DEFAULT_SEED_COUNT = 10
MASK_DILATION_PX = 3
RESIDUAL_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# noise schedule and residuals


@dataclass
class NoiseSchedule:
    """Cumulative signal coefficients alpha_bar[t] for t in [0, T]."""

    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or ab.size < 2:
            raise ValueError("alpha_bar must be a 1-d sequence over t >= 1")
        if abs(ab[0] - 1.0) > 1e-6:
            raise ValueError(f"alpha_bar[0] must be 1, got {ab[0]}")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ValueError("alpha_bar values must lie in (0, 1]")
        if np.any(np.diff(ab) > 0):
            raise ValueError("alpha_bar must be nonincreasing")
        self.alpha_bar = ab

    @property
    def T(self):
        return self.alpha_bar.size - 1

    def at(self, t):
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    @staticmethod
    def ddpm_linear(T=1000, beta_start=1e-4, beta_end=0.02):
        betas = np.linspace(beta_start, beta_end, T)
        ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        return NoiseSchedule(ab)


def perturb_latent(z0, t, eps, schedule):
    """Forward-process sample z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    ab = schedule.at(t)
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def noise_residual(denoiser, z_t, y, t, eps):
    """Difference between the denoiser's noise estimate and the truth."""
    pred = np.asarray(denoiser(z_t, y, t), dtype=np.float64)
    if pred.shape != np.shape(eps):
        raise InpaintServiceError(
            f"denoiser returned shape {pred.shape}, expected {np.shape(eps)}")
    return pred - np.asarray(eps, dtype=np.float64)


class IdentityCodec:
    """Latent codec with no learned transform (factor 1, 3 channels)."""

    factor = 1
    channels = 3

    def encode(self, image):
        return np.asarray(image, dtype=np.float64).copy()

    def decode(self, latent):
        return np.asarray(latent, dtype=np.float64).copy()


def otsu_threshold(values, bins=256):
    """Histogram threshold maximizing inter-class variance."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        return lo
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / v.size
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    w1 = 1.0 - w0
    mu_cum = np.cumsum(p * centers)
    mu_tot = mu_cum[-1]
    with np.errstate(invalid="ignore", divide="ignore"):
        m0 = mu_cum / w0
        m1 = (mu_tot - mu_cum) / w1
        var_between = w0 * w1 * (m0 - m1) ** 2
    var_between[~np.isfinite(var_between)] = -1.0
    k = int(np.argmax(var_between))
    return float(edges[k + 1])


def make_inpaint_mask(image, codec, denoiser, schedule, t=DEFAULT_TIMESTEP,
                      seeds=DEFAULT_SEED_COUNT, prompt=""):
    """Residual-based detection mask for one image.

    Encodes the image, perturbs with per-seed noise at timestep t, and
    decodes the magnitude of each denoiser residual; the seed-averaged
    magnitude is binarized by Otsu threshold and dilated 3 pixels. A
    residual that never exceeds a small floor yields the empty mask.
    """
    if np.isscalar(seeds):
        seeds = range(int(seeds))
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    image = np.asarray(image, dtype=np.float64)
    z0 = codec.encode(image)
    acc = None
    for seed in seeds:
        rng = np.random.default_rng(int(seed))
        eps = rng.standard_normal(z0.shape)
        z_t = perturb_latent(z0, t, eps, schedule)
        res = noise_residual(denoiser, z_t, prompt, t, eps)
        mag = np.asarray(codec.decode(np.abs(res)), dtype=np.float64)
        acc = mag if acc is None else acc + mag
    avg = acc / len(seeds)
    if avg.ndim == 3:
        avg = avg.mean(axis=2)
    if avg.shape != image.shape[:2]:
        raise InpaintServiceError(
            f"decoded residual shape {avg.shape} does not match image "
            f"{image.shape[:2]}")
    if float(avg.max()) <= RESIDUAL_FLOOR:
        return np.zeros(avg.shape, dtype=np.uint8)
    thresh = max(otsu_threshold(avg), RESIDUAL_FLOOR)
    mask = avg > thresh
    st = ndimage.generate_binary_structure(2, 1)
    mask = ndimage.binary_dilation(mask, st, iterations=MASK_DILATION_PX)
    return mask.astype(np.uint8)


def coverage_mask(render_out, tau_alpha=0.5):
    """Alpha-coverage fallback mask: thin spots inside the target's box.

    The bounding rectangle is taken from the render's own support
    (pixels with any visible contribution) and padded by 15 percent per
    side, so gaps just past the silhouette still count.
    """
    alpha = np.asarray(render_out.alpha, dtype=np.float64)
    support = alpha >= min(0.02, tau_alpha)
    if not support.any():
        return np.zeros(alpha.shape, dtype=np.uint8)
    rows = np.where(support.any(axis=1))[0]
    cols = np.where(support.any(axis=0))[0]
    r0, r1 = int(rows[0]), int(rows[-1])
    c0, c1 = int(cols[0]), int(cols[-1])
    pad = max(4, int(round(0.15 * max(r1 - r0 + 1, c1 - c0 + 1))))
    r0 = max(0, r0 - pad)
    c0 = max(0, c0 - pad)
    r1 = min(alpha.shape[0] - 1, r1 + pad)
    c1 = min(alpha.shape[1] - 1, c1 + pad)
    mask = np.zeros(alpha.shape, dtype=np.uint8)
    box = mask[r0:r1 + 1, c0:c1 + 1]
    box[alpha[r0:r1 + 1, c0:c1 + 1] < tau_alpha] = 1
    return mask


# ---------------------------------------------------------------------------
# novel-view placement


def sample_novel_views(model, count, strategy="fibonacci", *,
                       image_size=64, fov_deg=55.0, radius_factor=1.5,
                       up=(0.0, 0.0, 1.0)):
    """Cameras on a Fibonacci sphere around the target.

    Placed at radius_factor times the target's bounding radius from its
    opacity-weighted centroid, all looking at the centroid.
    """
    if strategy != "fibonacci":
        raise ValueError(f"unknown strategy {strategy!r}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if len(model) == 0:
        raise DiskSplatError("target model is empty")
    ops = model.opacities
    total = float(ops.sum())
    if total <= 0:
        raise DiskSplatError("target model is fully transparent")
    centroid = (ops[:, None] * model.centers).sum(axis=0) / total
    radius = float(np.linalg.norm(model.centers - centroid, axis=1).max())
    if radius <= 1e-9:
        raise DiskSplatError("target model has zero spatial extent")

    golden = np.pi * (3.0 - np.sqrt(5.0))
    up = np.asarray(up, dtype=np.float64)
    cams = []
    for i in range(count):
        z = 1.0 - 2.0 * (i + 0.5) / count
        r = np.sqrt(max(0.0, 1.0 - z * z))
        theta = golden * i
        direction = np.array([r * np.cos(theta), r * np.sin(theta), z])
        eye = centroid + radius_factor * radius * direction
        cam_up = up
        if abs(float(direction @ up)) > 0.999 * np.linalg.norm(up):
            cam_up = np.array([1.0, 0.0, 0.0])
        cams.append(look_at(eye, centroid, cam_up, width=image_size,
                            height=image_size, fov_deg=fov_deg))
    return cams


# ---------------------------------------------------------------------------
# wire protocol


def _encode_png(array, mode):
    buf = io.BytesIO()
    Image.fromarray(array, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _decode_png(text):
    raw = base64.b64decode(text.encode("ascii"))
    return np.asarray(Image.open(io.BytesIO(raw)))


def image_to_uint8(image):
    """Quantize a float image in [0, 1] to 8-bit; uint8 passes through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


class InpaintClient:
    """HTTP client for the inpainting service.

    Retries transient failures with exponential backoff; on success the
    unmasked pixels of the reply are replaced by the request's so the
    service can never alter what the model already knows.
    """

    def __init__(self, url, timeout=120.0, retries=3, backoff=1.0):
        self.url = url.rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.session = requests.Session()

    def _post(self, path, body):
        last = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(self.url + path, json=body,
                                         timeout=self.timeout)
            except requests.RequestException as e:
                last = f"request failed: {e}"
                continue
            if resp.status_code == 200:
                return resp.json()
            try:
                detail = resp.json().get("error", resp.text)
            except ValueError:
                detail = resp.text
            last = f"status {resp.status_code}: {detail}"
        raise InpaintServiceError(
            f"{path} failed after {self.retries + 1} attempts ({last})")

    def inpaint(self, image, mask, prompt="", seed=0):
        """Repair `image` inside `mask`; both 8-bit, mask single channel."""
        image = image_to_uint8(image)
        mask = np.asarray(mask)
        if mask.shape != image.shape[:2]:
            raise InpaintServiceError(
                f"mask shape {mask.shape} does not match image "
                f"{image.shape[:2]}")
        keep = mask == 0
        if keep.all():
            return image.copy()
        body = {"image": _encode_png(image, "RGB"),
                "mask": _encode_png((mask > 0).astype(np.uint8) * 255, "L"),
                "prompt": prompt, "seed": int(seed)}
        reply = self._post("/inpaint", body)
        if "image" not in reply:
            raise InpaintServiceError("reply missing 'image' field")
        out = _decode_png(reply["image"])
        if out.shape != image.shape:
            raise InpaintServiceError(
                f"reply image shape {out.shape} != request {image.shape}")
        out = out.copy()
        out[keep] = image[keep]
        return out


def request_inpaint(client, image, mask, prompt="", seed=0):
    """Send one repair request; float images round-trip as floats."""
    if np.asarray(image).dtype == np.uint8:
        return client.inpaint(image, mask, prompt=prompt, seed=seed)
    out = client.inpaint(image_to_uint8(image), mask, prompt=prompt,
                         seed=seed)
    return out.astype(np.float64) / 255.0


class RemoteDenoiser:
    """Denoiser realized by the service's /predict_noise endpoint."""

    def __init__(self, url, timeout=120.0, retries=3, backoff=1.0):
        self._client = InpaintClient(url, timeout=timeout, retries=retries,
                                     backoff=backoff)

    def __call__(self, z_t, y, t):
        z_t = np.asarray(z_t, dtype=np.float64)
        body = {"latent": base64.b64encode(
                    z_t.astype("<f4").tobytes()).decode("ascii"),
                "shape": list(z_t.shape),
                "timestep": int(t), "prompt": y}
        reply = self._client._post("/predict_noise", body)
        if "noise" not in reply:
            raise InpaintServiceError("reply missing 'noise' field")
        raw = base64.b64decode(reply["noise"].encode("ascii"))
        noise = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if noise.size != z_t.size:
            raise InpaintServiceError(
                f"noise has {noise.size} values, expected {z_t.size}")
        return noise.reshape(z_t.shape)


# ---------------------------------------------------------------------------
# the loop


@dataclass
class ReplenishConfig:
    novel_views: int = 12
    image_size: int = 64
    fov_deg: float = 55.0
    radius_factor: float = 1.5
    mask_mode: str = "coverage"
    tau_alpha: float = 0.5
    timestep: int = DEFAULT_TIMESTEP
    seeds: int = DEFAULT_SEED_COUNT
    prompt: str = ""
    iterations: int = 800
    seed: int = 0
    max_concurrent: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    train_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask_mode not in ("residual", "coverage"):
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.novel_views < 0:
            raise ValueError("novel_views must be >= 0")

    @staticmethod
    def from_dict(data, source="config"):
        known = {f.name for f in fields(ReplenishConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise DiskSplatError(
                f"{source} has unknown keys: {', '.join(unknown)}")
        cfg = ReplenishConfig(**data)
        if isinstance(cfg.background, list):
            cfg.background = tuple(cfg.background)
        return cfg


@dataclass
class ReplenishResult:
    model: object
    head: object
    cameras: list
    images: list
    masks: list
    requests_issued: int
    requests_skipped: int
    train_rows: list


class _NovelViews:
    """Manifest-shaped adapter over in-memory (camera, image) pairs."""

    def __init__(self, cameras, images, bounds_min, bounds_max):
        self.cameras = list(cameras)
        self.views = list(range(len(self.cameras)))
        self._images = [np.asarray(im, dtype=np.float64) for im in images]
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(bounds_max, dtype=np.float64)

    def load_image(self, i):
        return self._images[i]

    def load_labels(self, i):
        return None

    def load_points(self):
        return None


def replenish_loop(scene, target_model, head, config=None, *, client=None,
                   codec=None, denoiser=None, schedule=None):
    """Detect and repair under-reconstructed regions of a target model.

    Renders novel views of the target, masks suspect regions, obtains
    repaired images from the inpainting service, and continues training
    on the repaired views with photometric supervision only. Only the
    target model is touched; anything else the caller extracted it from
    stays as it was. Returns a ReplenishResult whose `model` field is
    the updated target.
    """
    from .training import TrainConfig, train

    config = ReplenishConfig() if config is None else config
    if config.novel_views == 0:
        return ReplenishResult(model=target_model.copy(), head=head.copy(),
                               cameras=[], images=[], masks=[],
                               requests_issued=0, requests_skipped=0,
                               train_rows=[])

    image_size = config.image_size
    if scene is not None and getattr(scene, "cameras", None):
        image_size = scene.cameras[0].width

    cams = sample_novel_views(target_model, config.novel_views,
                              image_size=image_size, fov_deg=config.fov_deg,
                              radius_factor=config.radius_factor)
    options = RenderOptions(background=tuple(config.background))
    if config.mask_mode == "residual":
        if denoiser is None:
            raise InpaintServiceError(
                "mask_mode 'residual' needs a denoiser")
        codec = IdentityCodec() if codec is None else codec
        schedule = NoiseSchedule.ddpm_linear() if schedule is None else schedule

    def prepare(idx):
        out = render(target_model, cams[idx], options=options)
        x0 = image_to_uint8(out.color)
        if config.mask_mode == "coverage":
            mask = coverage_mask(out, tau_alpha=config.tau_alpha)
        else:
            mask = make_inpaint_mask(out.color, codec, denoiser, schedule,
                                     t=config.timestep, seeds=config.seeds,
                                     prompt=config.prompt)
        if not mask.any():
            return x0, mask, False
        if client is None:
            raise InpaintServiceError(
                "nonempty inpaint mask but no service client configured")
        repaired = client.inpaint(x0, mask, prompt=config.prompt, seed=idx)
        return repaired, mask, True

    workers = max(1, config.max_concurrent)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(prepare, range(len(cams))))
    images = [r[0].astype(np.float64) / 255.0 for r in results]
    masks = [r[1] for r in results]
    issued = sum(1 for r in results if r[2])

    lo, hi = target_model.bounds()
    pad = 2.0 * float(target_model.scales.max())
    adapter = _NovelViews(cams, images, lo - pad, hi + pad)

    overrides = dict(config.train_overrides)
    base = dict(iterations=config.iterations, seed=config.seed,
                sh_degree=target_model.sh_degree, freeze_geometry=False,
                lambda_oe=0.0, lambda_cs=0.0,
                densify_start=100, densify_interval=50,
                densify_stop=max(101, int(0.8 * config.iterations)),
                background=tuple(config.background))
    base.update(overrides)
    train_cfg = TrainConfig.from_dict(base, source="replenish train config")

    model, head_out, rows = train(adapter, train_cfg, model=target_model,
                                  head=head)
    return ReplenishResult(model=model, head=head_out, cameras=cams,
                           images=images, masks=masks,
                           requests_issued=issued,
                           requests_skipped=len(cams) - issued,
                           train_rows=rows)
