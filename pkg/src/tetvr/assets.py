"""Cameras, images, scalar volumes, transfer functions and ground-truth baking."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage


class AssetError(ValueError):
    """Raised for unreadable or malformed asset files."""


# -- cameras ---------------------------------------------------------------

def perspective(fov_x, width, height, near=0.01, far=100.0):
    """Pinhole projection with NDC depth in [0, 1] and NDC y pointing down."""
    fx = 1.0 / np.tan(0.5 * fov_x)
    fy = fx * width / height
    return np.array([
        [fx, 0.0, 0.0, 0.0],
        [0.0, -fy, 0.0, 0.0],
        [0.0, 0.0, far / (near - far), near * far / (near - far)],
        [0.0, 0.0, -1.0, 0.0],
    ])


class Camera:
    """Pinhole camera with OpenGL-style view space (looking down -Z).

    Pixel coordinates are continuous, with ``(0, 0)`` at the top-left image
    corner; pixel ``(i, j)`` has its center at ``(i + 0.5, j + 0.5)``.
    """

    def __init__(self, view, projection, width, height, near=0.01, far=100.0, name=""):
        if width < 1 or height < 1:
            raise ValueError("viewport must be at least 1x1")
        self.view = np.asarray(view, dtype=np.float64).reshape(4, 4)
        self.projection = np.asarray(projection, dtype=np.float64).reshape(4, 4)
        self.width, self.height = int(width), int(height)
        self.near, self.far = float(near), float(far)
        self.name = name
        self.view_proj = self.projection @ self.view
        if abs(np.linalg.det(self.view_proj)) < 1e-300:
            raise ValueError("view-projection matrix is singular")
        self.inv_view_proj = np.linalg.inv(self.view_proj)
        self.origin = np.linalg.inv(self.view)[:3, 3]

    @classmethod
    def from_c2w(cls, c2w, fov_x, width, height, near=0.01, far=100.0, name=""):
        c2w = np.asarray(c2w, dtype=np.float64).reshape(4, 4)
        return cls(np.linalg.inv(c2w), perspective(fov_x, width, height, near, far),
                   width, height, near, far, name)

    @classmethod
    def look_at(cls, eye, target, up, fov_x, width, height, near=0.01, far=100.0):
        return cls.from_c2w(look_at_c2w(eye, target, up), fov_x, width, height, near, far)

    @property
    def c2w(self):
        return np.linalg.inv(self.view)

    @property
    def fov_x(self):
        return 2.0 * np.arctan(1.0 / self.projection[0, 0])

    def with_resolution(self, width, height) -> "Camera":
        return Camera.from_c2w(self.c2w, self.fov_x, width, height, self.near, self.far,
                               self.name)

    def project(self, points):
        """World points to ``(pixel_xy, ndc_depth, clip_w)``."""
        pts = np.asarray(points, dtype=np.float64)
        clip = pts @ self.view_proj[:3, :3].T + self.view_proj[:3, 3]
        w = pts @ self.view_proj[3, :3] + self.view_proj[3, 3]
        ndc = clip / w[..., None]
        px = np.stack([(ndc[..., 0] + 1) * 0.5 * self.width,
                       (ndc[..., 1] + 1) * 0.5 * self.height], axis=-1)
        return px, ndc[..., 2], w

    def unproject(self, pixel_xy, ndc_depth):
        """Inverse of :meth:`project` for points in front of the camera."""
        pixel_xy = np.asarray(pixel_xy, dtype=np.float64)
        ndc = np.stack([2 * pixel_xy[..., 0] / self.width - 1,
                        2 * pixel_xy[..., 1] / self.height - 1,
                        np.asarray(ndc_depth, dtype=np.float64)
                        * np.ones(pixel_xy.shape[:-1])], axis=-1)
        h = ndc @ self.inv_view_proj[:3, :3].T + self.inv_view_proj[:3, 3]
        hw = ndc @ self.inv_view_proj[3, :3] + self.inv_view_proj[3, 3]
        return h / hw[..., None]

    def ray(self, px, py):
        """Unit ray direction through continuous pixel coordinate ``(px, py)``."""
        return self.rays(np.array([[px, py]], dtype=np.float64))[0]

    def rays(self, pixel_xy):
        far = self.unproject(pixel_xy, 1.0)
        d = far - self.origin
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def pixel_rays(self):
        """Unit directions through all pixel centers, row-major, shape (H*W, 3)."""
        jj, ii = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        xy = np.stack([ii.ravel() + 0.5, jj.ravel() + 0.5], axis=1)
        return self.rays(xy)

    def ndc_depth(self, points):
        return self.project(points)[1]


def look_at_c2w(eye, target, up):
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up / np.linalg.norm(up))) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(fwd[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    true_up = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, -fwd, eye
    return c2w


def orbit_cameras(n, radius, fov_x, width, height, target=(0.0, 0.0, 0.0), near=0.01,
                  far=100.0):
    """``n`` cameras on a Fibonacci sphere looking at ``target``."""
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = np.pi * (3 - np.sqrt(5)) * k
    r = np.sqrt(1 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    cams = []
    for i, d in enumerate(dirs):
        eye = np.asarray(target) + radius * d
        cam = Camera.look_at(eye, target, (0.0, 0.0, 1.0), fov_x, width, height, near, far)
        cam.name = f"r_{i}"
        cams.append(cam)
    return cams


def load_camera_set(path, width=None, height=None, near=0.01, far=100.0):
    """Read a NeRF-synthetic ``transforms.json`` pose file.

    Resolution comes from ``w``/``h`` in the file unless given explicitly.
    """
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise AssetError(f"cannot parse pose file {path}: {exc}") from exc
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise AssetError(f"{path}: missing camera_angle_x or frames")
    fov = float(meta["camera_angle_x"])
    width = int(width or meta.get("w", 800))
    height = int(height or meta.get("h", width))
    cams = []
    for i, frame in enumerate(meta["frames"]):
        name = Path(frame.get("file_path", f"frame_{i}")).name
        mat = np.asarray(frame.get("transform_matrix"), dtype=np.float64)
        if mat.shape != (4, 4) or not np.all(np.isfinite(mat)):
            raise AssetError(f"{path}: frame {i} ({name}) has a malformed transform_matrix")
        if abs(np.linalg.det(mat)) < 1e-12:
            raise AssetError(f"{path}: frame {i} ({name}) transform_matrix is not invertible")
        cams.append(Camera.from_c2w(mat, fov, width, height, near, far, name=name))
    return cams


def save_camera_set(path, cameras, file_paths=None):
    frames = []
    for i, cam in enumerate(cameras):
        fp = file_paths[i] if file_paths else f"./{cam.name or f'r_{i}'}"
        frames.append({"file_path": fp, "transform_matrix": cam.c2w.tolist()})
    meta = {"camera_angle_x": float(cameras[0].fov_x), "w": cameras[0].width,
            "h": cameras[0].height, "frames": frames}
    Path(path).write_text(json.dumps(meta, indent=2))


# -- images ----------------------------------------------------------------

class ImageBuffer:
    """Linear float RGBA image, ``data`` has shape (height, width, 4)."""

    def __init__(self, data):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 4:
            raise ValueError("image data must have shape (H, W, 4)")
        self.data = data

    @classmethod
    def filled(cls, width, height, rgba):
        return cls(np.broadcast_to(np.asarray(rgba, dtype=np.float64),
                                   (height, width, 4)).copy())

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def rgb(self):
        return self.data[..., :3]

    @property
    def alpha(self):
        return self.data[..., 3]

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.data, other.data)


def linear_to_srgb(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x):
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


_PFM_MAGIC = b"PFD4"  # float64 RGBA variant of PFM


def write_image(path, image: ImageBuffer):
    """Write ``.pfm`` (lossless float64 RGBA) or ``.png`` (8-bit sRGB)."""
    path = Path(path)
    if not np.all(np.isfinite(image.data)):
        raise ValueError(f"refusing to write non-finite pixels to {path}")
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        with open(path, "wb") as fh:
            fh.write(_PFM_MAGIC + f"\n{image.width} {image.height}\n-1.0\n".encode("ascii"))
            fh.write(np.ascontiguousarray(image.data[::-1], dtype="<f8").tobytes())
    elif suffix == ".png":
        rgb = linear_to_srgb(image.rgb)
        a = np.clip(image.alpha, 0.0, 1.0)[..., None]
        px = np.round(np.concatenate([rgb, a], axis=2) * 255).astype(np.uint8)
        Image.fromarray(px, "RGBA").save(path)
    else:
        raise AssetError(f"unsupported image format {suffix!r}")


def read_image(path, linear=False) -> ImageBuffer:
    """Read an image written by :func:`write_image`, a standard PFM, or a PNG.

    PNG color is decoded from sRGB unless ``linear`` is set.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise AssetError(f"cannot read image {path}: {exc.strerror}") from exc
    suffix = path.suffix.lower()
    if suffix == ".pfm":
        parts = raw.split(b"\n", 3)
        if len(parts) < 4:
            raise AssetError(f"{path}: truncated PFM header")
        magic, size, scale, body = parts
        w, h = (int(v) for v in size.split())
        endian = "<" if float(scale) < 0 else ">"
        if magic == _PFM_MAGIC:
            data = np.frombuffer(body, dtype=endian + "f8", count=w * h * 4).reshape(h, w, 4)
        elif magic in (b"PF", b"Pf"):
            ch = 3 if magic == b"PF" else 1
            px = np.frombuffer(body, dtype=endian + "f4", count=w * h * ch).reshape(h, w, ch)
            data = np.ones((h, w, 4))
            data[..., :3] = px
        else:
            raise AssetError(f"{path}: unknown PFM variant {magic!r}")
        return ImageBuffer(data[::-1].astype(np.float64))
    if suffix == ".png":
        try:
            px = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
        except OSError as exc:
            raise AssetError(f"cannot decode {path}") from exc
        if not linear:
            px[..., :3] = srgb_to_linear(px[..., :3])
        return ImageBuffer(px)
    raise AssetError(f"unsupported image format {suffix!r}")


# -- volumes and transfer functions ------------------------------------------

class ScalarVolume:
    """Node-sampled scalar field, samples normalized to [0, 1].

    ``samples`` is stored x-fastest with shape (nz, ny, nx).  Node ``(i, j, k)``
    sits at ``origin + (i, j, k) * spacing``.
    """

    def __init__(self, samples, spacing=(1.0, 1.0, 1.0), origin=None):
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 3:
            raise ValueError("samples must be a 3D array (nz, ny, nx)")
        if not np.all(np.isfinite(samples)):
            raise ValueError("volume samples must be finite")
        self.samples = samples
        self.spacing = np.asarray(spacing, dtype=np.float64)
        extent = (np.array(self.dims) - 1) * self.spacing
        self.origin = -0.5 * extent if origin is None else np.asarray(origin, dtype=np.float64)

    @property
    def dims(self):
        nz, ny, nx = self.samples.shape
        return (nx, ny, nz)

    def bbox(self):
        return self.origin, self.origin + (np.array(self.dims) - 1) * self.spacing

    def sample(self, points):
        """Trilinear interpolation at world points (clamped to the grid)."""
        idx = (np.asarray(points) - self.origin) / self.spacing
        coords = idx[..., ::-1].reshape(-1, 3).T
        out = ndimage.map_coordinates(self.samples, coords, order=1, mode="nearest")
        return out.reshape(np.shape(points)[:-1])


def load_raw_volume(path) -> ScalarVolume:
    """Read ``name.raw`` plus its sidecar header ``name.hdr``.

    The header holds lines ``dims NX NY NZ``, ``dtype uint8|uint16|float32`` and
    optionally ``spacing SX SY SZ``.  Integer data is scaled by the dtype
    maximum, float data by its range.
    """
    path = Path(path)
    hdr = path.with_suffix(".hdr")
    try:
        fields = dict(line.split(None, 1) for line in hdr.read_text().splitlines() if line.strip())
        raw = path.read_bytes()
    except (OSError, ValueError) as exc:
        raise AssetError(f"cannot read volume {path} / {hdr}: {exc}") from exc
    try:
        nx, ny, nz = (int(v) for v in fields["dims"].split())
        dtype = fields["dtype"].strip()
        spacing = tuple(float(v) for v in fields.get("spacing", "1 1 1").split())
    except (KeyError, ValueError) as exc:
        raise AssetError(f"{hdr}: malformed header") from exc
    if dtype not in ("uint8", "uint16", "float32"):
        raise AssetError(f"{hdr}: unsupported dtype {dtype}")
    data = np.frombuffer(raw, dtype="<" + np.dtype(dtype).str[1:])
    if data.size != nx * ny * nz:
        raise AssetError(f"{path}: expected {nx * ny * nz} samples, found {data.size}")
    data = data.astype(np.float64).reshape(nz, ny, nx)
    if dtype == "float32":
        lo, hi = data.min(), data.max()
        data = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    else:
        data /= np.iinfo(dtype).max
    return ScalarVolume(data, spacing)


def save_raw_volume(path, volume: ScalarVolume, dtype="float32"):
    """Write ``name.raw`` and ``name.hdr``; integer dtypes store ``samples * max``."""
    if dtype not in ("uint8", "uint16", "float32"):
        raise ValueError(f"unsupported dtype {dtype}")
    path = Path(path)
    nx, ny, nz = volume.dims
    if dtype == "float32":
        data = volume.samples.astype("<f4")
    else:
        top = np.iinfo(dtype).max
        data = np.round(np.clip(volume.samples, 0.0, 1.0) * top)
        data = data.astype("<" + np.dtype(dtype).str[1:])
    path.write_bytes(np.ascontiguousarray(data).tobytes())
    sx, sy, sz = (float(v) for v in volume.spacing)
    path.with_suffix(".hdr").write_text(f"dims {nx} {ny} {nz}\ndtype {dtype}\n"
                                         f"spacing {sx!r} {sy!r} {sz!r}\n")


class TransferFunction:
    """Piecewise-linear RGBA map over normalized scalar values."""

    def __init__(self, positions, rgba):
        pos = np.asarray(positions, dtype=np.float64)
        rgba = np.asarray(rgba, dtype=np.float64).reshape(len(pos), 4)
        if len(pos) < 2 or np.any(np.diff(pos) <= 0):
            raise ValueError("transfer function positions must be strictly increasing")
        self.positions = (pos - pos[0]) / (pos[-1] - pos[0])
        self.rgba = rgba

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return np.stack([np.interp(s, self.positions, self.rgba[:, c]) for c in range(4)],
                        axis=-1)


def load_transfer_function(path) -> TransferFunction:
    """Read lines ``position r g b a``; ``#`` starts a comment."""
    rows = []
    try:
        for line in Path(path).read_text().splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append([float(v) for v in line.split()])
    except (OSError, ValueError) as exc:
        raise AssetError(f"cannot read transfer function {path}: {exc}") from exc
    rows = np.array(rows)
    if rows.ndim != 2 or rows.shape[1] != 5:
        raise AssetError(f"{path}: expected lines of 'position r g b a'")
    return TransferFunction(rows[:, 0], rows[:, 1:])


def alpha_to_extinction(alpha, reference_length):
    """TF opacity (per reference length) to extinction per world unit."""
    a = np.clip(alpha, 0.0, 1.0 - 1e-12)
    return -np.log1p(-a) / reference_length


# -- ground truth ------------------------------------------------------------

def bake_ground_truth(volume: ScalarVolume, tf: TransferFunction, cameras, step,
                      reference_length=None, background=(0.0, 0.0, 0.0, 1.0)):
    """Ray-march ``volume`` with post-classification for every camera.

    Each ray is cut into ``ceil(L / step)`` equal steps over its chord ``L``
    through the volume box; samples are taken at step midpoints and
    composited front to back with Beer-Lambert step opacities.
    """
    if not cameras:
        raise ValueError("bake_ground_truth needs at least one camera")
    if step <= 0:
        raise ValueError("step size must be positive")
    lo, hi = volume.bbox()
    if reference_length is None:
        reference_length = 0.01 * float(np.linalg.norm(hi - lo))
    bg = np.asarray(background, dtype=np.float64)
    images = []
    for cam in cameras:
        d = cam.pixel_rays()
        o = cam.origin
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            t0 = (lo - o) * inv
            t1 = (hi - o) * inv
        tmin = np.nanmax(np.minimum(t0, t1), axis=1)
        tmax = np.nanmin(np.maximum(t0, t1), axis=1)
        tmin = np.maximum(tmin, cam.near)
        length = np.where(tmax > tmin, tmax - tmin, 0.0)
        nsteps = np.ceil(length / step).astype(np.int64)
        h = np.where(nsteps > 0, length / np.maximum(nsteps, 1), 0.0)
        color = np.zeros((len(d), 3))
        trans = np.ones(len(d))
        for k in range(int(nsteps.max(initial=0))):
            act = np.flatnonzero(k < nsteps)
            s = tmin[act] + (k + 0.5) * h[act]
            rgba = tf(volume.sample(o + s[:, None] * d[act]))
            sigma = alpha_to_extinction(rgba[:, 3], reference_length)
            a = -np.expm1(-sigma * h[act])
            color[act] += (trans[act] * a)[:, None] * rgba[:, :3]
            trans[act] *= 1.0 - a
        out = np.empty((len(d), 4))
        out[:, :3] = color + trans[:, None] * bg[:3] * bg[3]
        out[:, 3] = 1.0 - trans * (1.0 - bg[3])
        images.append(ImageBuffer(out.reshape(cam.height, cam.width, 4)))
    return images


def gaussian_blob_volume(dims=(48, 48, 48), bbox=((-1, -1, -1), (1, 1, 1)),
                         centers=((-0.35, -0.1, 0.0), (0.35, 0.15, 0.05)),
                         widths=(0.42, 0.34), amplitudes=(1.0, 0.8)) -> ScalarVolume:
    """Synthetic scene: a sum of isotropic Gaussians, max-normalized."""
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    axes = [np.linspace(lo[a], hi[a], dims[a]) for a in range(3)]
    z, y, x = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    field = np.zeros_like(x)
    for c, w, amp in zip(centers, widths, amplitudes):
        r2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
        field += amp * np.exp(-0.5 * r2 / w ** 2)
    field /= field.max()
    spacing = (hi - lo) / (np.array(dims) - 1)
    return ScalarVolume(field, spacing, origin=lo)


def blob_transfer_function() -> TransferFunction:
    """Smooth two-tone ramp used with :func:`gaussian_blob_volume`."""
    return TransferFunction(
        [0.0, 0.1, 0.4, 0.7, 1.0],
        [[0.0, 0.0, 0.0, 0.0],
         [0.15, 0.3, 0.8, 0.02],
         [0.2, 0.75, 0.55, 0.06],
         [0.9, 0.55, 0.2, 0.12],
         [1.0, 0.9, 0.8, 0.2]])
