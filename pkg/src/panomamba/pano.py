"""Conversions among the three 360-degree image representations.

Conventions (fixed for the whole repo):
  - equirectangular: width W = 2H, x maps longitude, y maps latitude,
    pixel centers at half-integer offsets, column 0 adjacent to column W-1;
  - world frame: +y up, +z forward at (lon, lat) = (0, 0), longitude
    lon in [-180, 180) increasing toward +x, latitude lat in [-90, 90];
  - cubemap faces F(+z), R(+x), B(-z), L(-x), U(+y), D(-y), all zero roll,
    each a 90-degree-fov pinhole so a face equals an NFoV view at its axis;
  - color channels sample bilinearly (x wraps, y clamps), mask channels
    sample nearest-neighbor so they stay binary.

All functions are pure and deterministic; no gradients flow through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor

UP = np.array([0.0, 1.0, 0.0])

# selection priority for rays on face boundaries
FACE_ORDER = ("F", "R", "B", "L", "U", "D")
# the listing order used for the omni-image context rows
FACE_ORDER_CONTEXT = ("F", "L", "B", "R", "U", "D")

_FACE_COORDS = {
    "F": (0.0, 0.0),
    "R": (90.0, 0.0),
    "B": (-180.0, 0.0),
    "L": (-90.0, 0.0),
    "U": (0.0, 90.0),
    "D": (0.0, -90.0),
}


def wrap_lon(lon):
    """Map any longitude into [-180, 180)."""
    return (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class ViewCoords:
    lon: float
    lat: float
    fov: float = 90.0

    def __post_init__(self):
        object.__setattr__(self, "lon", float(wrap_lon(self.lon)))
        object.__setattr__(self, "lat", float(self.lat))
        object.__setattr__(self, "fov", float(self.fov))
        if not -90.0 <= self.lat <= 90.0:
            raise ContractError(f"latitude {self.lat} outside [-90, 90]")
        if not 0.0 < self.fov <= 120.0:
            raise ContractError(f"fov {self.fov} outside (0, 120]")


@dataclass
class EquirectImage:
    """Full-sphere equirect image; channel 3 (when present) is the mask."""

    pixels: Tensor

    def __post_init__(self):
        if isinstance(self.pixels, np.ndarray):
            self.pixels = Tensor(self.pixels)
        h, w, c = self.pixels.shape
        if w != 2 * h:
            raise ContractError(f"equirect needs W == 2H, got {w}x{h}")

    @property
    def np(self):
        return self.pixels.data

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    @property
    def rgb(self):
        return self.np[:, :, :3]

    @property
    def mask(self):
        if self.channels < 4:
            return np.ones(self.np.shape[:2])
        return self.np[:, :, 3]

    def copy(self):
        return EquirectImage(Tensor(self.np.copy()))


@dataclass
class CubeMap:
    faces: dict = field(default_factory=dict)

    def __post_init__(self):
        sizes = {f: self.face(f).shape for f in FACE_ORDER}
        ext = {s[:2] for s in sizes.values()}
        chans = {s[2] for s in sizes.values()}
        if len(ext) != 1 or len(chans) != 1:
            raise ContractError(f"cubemap faces disagree on extent/channels: {sizes}")
        (hc, wc) = next(iter(ext))
        if hc != wc:
            raise ContractError(f"cubemap faces must be square, got {hc}x{wc}")

    def face(self, name):
        f = self.faces[name]
        return f.data if isinstance(f, Tensor) else f

    @property
    def face_size(self):
        return self.face("F").shape[0]

    @property
    def channels(self):
        return self.face("F").shape[2]


@dataclass
class NFoVView:
    coords: ViewCoords
    image: Tensor

    def __post_init__(self):
        if isinstance(self.image, np.ndarray):
            self.image = Tensor(self.image)
        h, w, _ = self.image.shape
        if h != w:
            raise ContractError(f"NFoV views are square, got {h}x{w}")

    @property
    def np(self):
        return self.image.data

    @property
    def size(self):
        return self.image.shape[0]

    @property
    def rgb(self):
        return self.np[:, :, :3]

    @property
    def mask(self):
        if self.image.shape[2] < 4:
            return np.ones(self.np.shape[:2])
        return self.np[:, :, 3]


# --- directions -------------------------------------------------------------


def dir_from_equirect(u, v, w, h):
    """Unit direction of pixel (u, v); accepts scalars or integer arrays."""
    u = np.asarray(u)
    v = np.asarray(v)
    if np.any(u < 0) or np.any(u >= w) or np.any(v < 0) or np.any(v >= h):
        raise ContractError(f"pixel outside image: u in [0,{w}), v in [0,{h})")
    lam = 2.0 * np.pi * (u + 0.5) / w - np.pi
    theta = np.pi / 2.0 - np.pi * (v + 0.5) / h
    ct = np.cos(theta)
    return np.stack([ct * np.sin(lam), np.sin(theta) * np.ones_like(ct), ct * np.cos(lam)], axis=-1)


def equirect_dir_grid(w, h):
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    return dir_from_equirect(u, v, w, h)


def dir_from_lonlat(lon, lat):
    lam = np.radians(lon)
    th = np.radians(lat)
    return np.array([np.cos(th) * np.sin(lam), np.sin(th), np.cos(th) * np.cos(lam)])


def camera_basis(coords):
    """Zero-roll orthonormal basis (forward, right, up) for a view."""
    f = dir_from_lonlat(coords.lon, coords.lat)
    if abs(f @ UP) > 1.0 - 1e-12:
        r = np.array([1.0, 0.0, 0.0])  # pole convention
    else:
        r = np.cross(UP, f)
        r /= np.linalg.norm(r)
    u = np.cross(f, r)
    return f, r, u


def view_ray_grid(coords, size):
    """Unit ray directions [size, size, 3] through each view pixel center."""
    f, r, u = camera_basis(coords)
    t = np.tan(np.radians(coords.fov) / 2.0)
    xs = ((np.arange(size) + 0.5) / size * 2.0 - 1.0) * t
    ys = ((np.arange(size) + 0.5) / size * 2.0 - 1.0) * t
    xn, yn = np.meshgrid(xs, ys)
    d = f + xn[..., None] * r - yn[..., None] * u
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def coord_channels(coords_or_face, out_size):
    """Per-pixel unit sphere direction of a view (or cubemap face) as 3 channels."""
    if isinstance(coords_or_face, str):
        lon, lat = _FACE_COORDS[coords_or_face]
        coords = ViewCoords(lon, lat, 90.0)
    else:
        coords = coords_or_face
    return Tensor(view_ray_grid(coords, out_size))


# --- equirect sampling ------------------------------------------------------


def _bilinear_wrap(img, uf, vf):
    """Sample [H, W, C] at continuous pixel coords (centers at i + 0.5).

    x wraps modulo W, y clamps at the top and bottom rows.
    """
    h, w = img.shape[:2]
    fu = uf - 0.5
    fv = vf - 0.5
    u0 = np.floor(fu).astype(int)
    v0 = np.floor(fv).astype(int)
    au = (fu - u0)[..., None]
    av = (fv - v0)[..., None]
    u0w = u0 % w
    u1w = (u0 + 1) % w
    v0c = np.clip(v0, 0, h - 1)
    v1c = np.clip(v0 + 1, 0, h - 1)
    p00 = img[v0c, u0w]
    p01 = img[v0c, u1w]
    p10 = img[v1c, u0w]
    p11 = img[v1c, u1w]
    return (
        p00 * (1 - au) * (1 - av)
        + p01 * au * (1 - av)
        + p10 * (1 - au) * av
        + p11 * au * av
    )


def _nearest_wrap(img, uf, vf):
    h, w = img.shape[:2]
    u = np.floor(uf).astype(int) % w
    v = np.clip(np.floor(vf).astype(int), 0, h - 1)
    return img[v, u]


def _dirs_to_equirect_uv(dirs, w, h):
    lam = np.arctan2(dirs[..., 0], dirs[..., 2])
    theta = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    uf = (lam + np.pi) / (2.0 * np.pi) * w
    vf = (np.pi / 2.0 - theta) / np.pi * h
    return uf, vf


def sample_equirect(img, dirs):
    """Sample an equirect array along unit directions; mask channel nearest."""
    arr = img.np if isinstance(img, EquirectImage) else img
    h, w = arr.shape[:2]
    uf, vf = _dirs_to_equirect_uv(dirs, w, h)
    out = _bilinear_wrap(arr, uf, vf)
    if arr.shape[2] >= 4:
        out[..., 3] = _nearest_wrap(arr[..., 3:], uf, vf)[..., 0]
    return out


# --- conversions ------------------------------------------------------------


def equirect_to_cubemap(img, face_size):
    if face_size < 4:
        raise ContractError(f"face_size must be >= 4, got {face_size}")
    faces = {}
    for name in FACE_ORDER:
        lon, lat = _FACE_COORDS[name]
        rays = view_ray_grid(ViewCoords(lon, lat, 90.0), face_size)
        faces[name] = Tensor(sample_equirect(img, rays))
    return CubeMap(faces)


def _sample_face(face, xn, yn, has_mask):
    """Bilinear sample a face image at normalized coords in [-1, 1]."""
    s = face.shape[0]
    jf = (xn + 1.0) / 2.0 * s
    if_ = (yn + 1.0) / 2.0 * s
    fu = np.clip(jf - 0.5, 0.0, s - 1.0)
    fv = np.clip(if_ - 0.5, 0.0, s - 1.0)
    u0 = np.floor(fu).astype(int)
    v0 = np.floor(fv).astype(int)
    u1 = np.minimum(u0 + 1, s - 1)
    v1 = np.minimum(v0 + 1, s - 1)
    au = (fu - u0)[..., None]
    av = (fv - v0)[..., None]
    out = (
        face[v0, u0] * (1 - au) * (1 - av)
        + face[v0, u1] * au * (1 - av)
        + face[v1, u0] * (1 - au) * av
        + face[v1, u1] * au * av
    )
    if has_mask:
        un = np.clip(np.floor(jf).astype(int), 0, s - 1)
        vn = np.clip(np.floor(if_).astype(int), 0, s - 1)
        out[..., 3] = face[vn, un, 3]
    return out


def cubemap_to_equirect(cube, w, h):
    if w != 2 * h:
        raise ContractError(f"equirect needs W == 2H, got {w}x{h}")
    dirs = equirect_dir_grid(w, h)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    # argmax over signed axis scores realizes the F>R>B>L>U>D tie priority
    scores = np.stack([z, x, -z, -x, y, -y], axis=-1)
    face_id = np.argmax(scores, axis=-1)
    c = cube.channels
    out = np.zeros((h, w, c))
    has_mask = c >= 4
    for fi, name in enumerate(FACE_ORDER):
        sel = face_id == fi
        if not np.any(sel):
            continue
        f, r, u = camera_basis(ViewCoords(*_FACE_COORDS[name], fov=90.0))
        d = dirs[sel]
        cz = d @ f
        xn = (d @ r) / cz
        yn = -(d @ u) / cz
        out[sel] = _sample_face(cube.face(name), xn, yn, has_mask)
    return EquirectImage(Tensor(out))


def extract_nfov(img, coords, out_size):
    rays = view_ray_grid(coords, out_size)
    return NFoVView(coords, Tensor(sample_equirect(img, rays)))


def frustum_mask(coords, w, h):
    """Boolean [H, W] of equirect pixels whose center ray is inside the view."""
    f, r, u = camera_basis(coords)
    t = np.tan(np.radians(coords.fov) / 2.0)
    dirs = equirect_dir_grid(w, h)
    c = dirs @ f
    a = dirs @ r
    b = dirs @ u
    return (c > 0) & (np.abs(a) <= c * t) & (np.abs(b) <= c * t)


def composite_nfov(img, view):
    """Scatter a view back into the panorama; covered pixels become known."""
    h, w = img.height, img.width
    coords = view.coords
    f, r, u = camera_basis(coords)
    t = np.tan(np.radians(coords.fov) / 2.0)
    dirs = equirect_dir_grid(w, h)
    c = dirs @ f
    a = dirs @ r
    b = dirs @ u
    inside = (c > 0) & (np.abs(a) <= c * t) & (np.abs(b) <= c * t)
    out = img.np.copy()
    d = dirs[inside]
    cz = d @ f
    xn = (d @ r) / (cz * t)
    yn = -(d @ u) / (cz * t)
    varr = view.np
    vc = varr.shape[2]
    sampled = _sample_face(varr, xn, yn, vc >= 4)
    nc = min(img.channels, vc, 3)
    out[inside, :nc] = sampled[..., :nc]
    if img.channels >= 4:
        out[inside, 3] = 1.0
    return EquirectImage(Tensor(out))


# --- small utilities --------------------------------------------------------


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak * peak / mse)


def blank_panorama(w, h):
    """All-unknown panorama with a mask channel."""
    return EquirectImage(Tensor(np.zeros((h, w, 4))))
