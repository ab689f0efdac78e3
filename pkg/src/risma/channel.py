"""Planar far-field channel model: geometry, field responses, fading draws.

Scene geometry is 2-D (positions in metres in the horizontal plane).  The
transmit region and the reflecting-surface grid use local coordinates with
the reference origin at the region centre; phase differences are measured
against that origin.  The grid's second local axis points out of the scene
plane, so for in-plane receivers the line-of-sight steering phase varies
only along the first grid axis.

Channel-uncertainty convention: the per-user radius is frozen when the
realization is created, using the canonical initial layout (half-wavelength
antenna grid, all-ones reflection phases); see ``new_realization``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import InvariantViolation


@dataclass(frozen=True)
class SystemConfig:
    """All physical and algorithmic parameters (linear units internally)."""

    L: int = 4              # movable transmit antennas
    N: int = 8              # reflecting elements
    M: int = 3              # users
    L_t: int = 4            # transmit paths
    L_r: int = 4            # receive paths
    wavelength: float = 0.1
    region_a: float = 0.3   # side of the square transmit region (m)
    min_dist: float = 0.05  # minimum antenna separation (m)
    P_t: float = 15.0       # power budget (W)
    sigma2: float = 1e-11   # per-user noise power (W)
    R_min: float = 1.0      # QoS rate (bps/Hz)
    rician_k: float = 3.0
    nu1: float = 2.0        # path-loss exponent, transmitter side
    nu2: float = 2.5        # path-loss exponent, user side
    P0: float = 1e-3        # reference gain at 1 m (linear)
    rho: float = 0.01       # CSI uncertainty fraction in [0, 1)
    bs_pos: tuple[float, float] = (0.0, 0.0)
    ris_pos: tuple[float, float] = (30.0, 0.0)
    user_center: tuple[float, float] = (30.0, -10.0)
    user_radius: float = 10.0
    max_outer: int = 20
    max_inner_precoding: int = 12
    max_inner_ris: int = 12
    max_sweeps_positions: int = 2
    randomization_count: int = 200
    ao_tol: float = 1e-4
    sca_tol: float = 1e-4
    solver_tol: float = 1e-7
    solver_max_iters: int = 100
    seed: int = 0
    enable_ma: bool = True

    def __post_init__(self):
        if self.L_t != self.L_r:
            raise InvariantViolation("transmit and receive path counts must match")
        if self.min_dist > self.region_a:
            raise InvariantViolation("min_dist must not exceed the region side")
        if not (0.0 <= self.rho < 1.0):
            raise InvariantViolation("rho must lie in [0, 1)")
        for name in ("P_t", "sigma2", "wavelength", "P0"):
            if getattr(self, name) <= 0:
                raise InvariantViolation(f"{name} must be positive")

    @property
    def num_paths(self) -> int:
        return self.L_t

    def replace(self, **kw) -> "SystemConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for k in ("bs_pos", "ris_pos", "user_center"):
            d[k] = list(d[k])
        return d

    @staticmethod
    def from_dict(d: dict) -> "SystemConfig":
        """Build a config from a dict; dB/dBm keys are converted to linear.

        ``sigma2_dbm`` -> watts via 10**((dBm - 30)/10); ``P0_db`` -> linear
        via 10**(dB/10).
        """
        d = dict(d)
        if "sigma2_dbm" in d:
            d["sigma2"] = 10 ** ((float(d.pop("sigma2_dbm")) - 30.0) / 10.0)
        if "P0_db" in d:
            d["P0"] = 10 ** (float(d.pop("P0_db")) / 10.0)
        for k in ("bs_pos", "ris_pos", "user_center"):
            if k in d:
                d[k] = tuple(d[k])
        known = set(SystemConfig.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return SystemConfig(**d)


@dataclass
class PathGeometry:
    """Angles of departure/arrival and the reflecting-grid layout."""

    tx_elev: np.ndarray
    tx_azim: np.ndarray
    rx_elev: np.ndarray
    rx_azim: np.ndarray
    ris_element_positions: np.ndarray  # (N, 2) local coordinates

    def __post_init__(self):
        for a in (self.tx_elev, self.tx_azim, self.rx_elev, self.rx_azim):
            if np.any(a < 0) or np.any(a > np.pi):
                raise InvariantViolation("angles must lie in [0, pi]")


@dataclass
class ChannelRealization:
    """One draw of geometry, path gains and user channels.

    ``rho_hat`` and ``cov_snapshot`` are frozen at creation from the
    canonical initial layout; they do not track later antenna or phase
    updates (the uncertainty radius is a scenario constant).
    """

    config: SystemConfig
    geometry: PathGeometry
    path_gains: np.ndarray       # (L_p,) diagonal entries of the path matrix
    h_ris_user: np.ndarray       # (M, N)
    user_positions: np.ndarray   # (M, 2)
    rho_hat: np.ndarray          # (M,)
    cov_snapshot: np.ndarray     # (M, L, L) estimated covariances at t0

    def to_json_dict(self) -> dict:
        def c2d(a):
            return {"re": np.real(a).tolist(), "im": np.imag(a).tolist()}

        return {
            "config": self.config.to_dict(),
            "tx_elev": self.geometry.tx_elev.tolist(),
            "tx_azim": self.geometry.tx_azim.tolist(),
            "rx_elev": self.geometry.rx_elev.tolist(),
            "rx_azim": self.geometry.rx_azim.tolist(),
            "ris_element_positions": self.geometry.ris_element_positions.tolist(),
            "path_gains": c2d(self.path_gains),
            "h_ris_user": c2d(self.h_ris_user),
            "user_positions": self.user_positions.tolist(),
            "rho_hat": self.rho_hat.tolist(),
            "cov_snapshot": c2d(self.cov_snapshot),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @staticmethod
    def from_json_dict(d: dict) -> "ChannelRealization":
        def d2c(x):
            return np.asarray(x["re"]) + 1j * np.asarray(x["im"])

        geo = PathGeometry(
            tx_elev=np.asarray(d["tx_elev"]),
            tx_azim=np.asarray(d["tx_azim"]),
            rx_elev=np.asarray(d["rx_elev"]),
            rx_azim=np.asarray(d["rx_azim"]),
            ris_element_positions=np.asarray(d["ris_element_positions"]),
        )
        return ChannelRealization(
            config=SystemConfig.from_dict(d["config"]),
            geometry=geo,
            path_gains=d2c(d["path_gains"]),
            h_ris_user=d2c(d["h_ris_user"]),
            user_positions=np.asarray(d["user_positions"]),
            rho_hat=np.asarray(d["rho_hat"]),
            cov_snapshot=d2c(d["cov_snapshot"]),
        )

    @staticmethod
    def from_json(s: str) -> "ChannelRealization":
        return ChannelRealization.from_json_dict(json.loads(s))


# ---------------------------------------------------------------------------
# field responses
# ---------------------------------------------------------------------------


def distance_diff(t, elev: float, azim: float) -> float:
    """Propagation-distance difference of one path between t and the origin."""
    x, y = float(t[0]), float(t[1])
    return x * np.sin(elev) * np.cos(azim) + y * np.cos(elev)


def frv(t, elevs: np.ndarray, azims: np.ndarray, wavelength: float) -> np.ndarray:
    """Per-path unit-modulus phase signature of a point; entries e^{j2pi chi/lambda}."""
    x, y = float(t[0]), float(t[1])
    chi = x * np.sin(elevs) * np.cos(azims) + y * np.cos(elevs)
    return np.exp(2j * np.pi / wavelength * chi)


def frm(points: np.ndarray, elevs, azims, wavelength: float) -> np.ndarray:
    """Stack of field-response vectors, one column per point: (paths, points)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    chi = (np.outer(np.sin(elevs) * np.cos(azims), pts[:, 0])
           + np.outer(np.cos(elevs), pts[:, 1]))
    return np.exp(2j * np.pi / wavelength * chi)


def ris_grid(n: int, wavelength: float) -> np.ndarray:
    """Half-wavelength grid of n elements, centred on the local origin."""
    rows = int(np.floor(np.sqrt(n)))
    while n % rows:
        rows -= 1
    cols = n // rows
    d = wavelength / 2.0
    xs = (np.arange(cols) - (cols - 1) / 2.0) * d
    ys = (np.arange(rows) - (rows - 1) / 2.0) * d
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def initial_antenna_grid(config: SystemConfig) -> np.ndarray:
    """Half-wavelength-spaced layout centred in the transmit region.

    Also the fixed-position baseline layout.  Raises if the region cannot
    hold ``L`` antennas at that spacing.
    """
    lam = config.wavelength
    rows = int(np.floor(np.sqrt(config.L)))
    while config.L % rows:
        rows -= 1
    cols = config.L // rows
    d = lam / 2.0
    if (cols - 1) * d > config.region_a or (rows - 1) * d > config.region_a:
        raise InvariantViolation("region too small for the initial grid layout")
    xs = (np.arange(cols) - (cols - 1) / 2.0) * d
    ys = (np.arange(rows) - (rows - 1) / 2.0) * d
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def check_antenna_layout(coords: np.ndarray, config: SystemConfig,
                         tol: float = 1e-9) -> None:
    """Raise unless all points are inside the region and pairwise separated."""
    half = config.region_a / 2.0
    if np.any(np.abs(coords) > half + tol):
        raise InvariantViolation("antenna outside the transmit region")
    ll = coords.shape[0]
    for i in range(ll):
        for j in range(i + 1, ll):
            if np.linalg.norm(coords[i] - coords[j]) < config.min_dist - tol:
                raise InvariantViolation("antenna separation below minimum")


# ---------------------------------------------------------------------------
# fading draws
# ---------------------------------------------------------------------------


def sample_path_geometry(config: SystemConfig, rng: np.random.Generator) -> PathGeometry:
    return PathGeometry(
        tx_elev=rng.uniform(0, np.pi, config.L_t),
        tx_azim=rng.uniform(0, np.pi, config.L_t),
        rx_elev=rng.uniform(0, np.pi, config.L_r),
        rx_azim=rng.uniform(0, np.pi, config.L_r),
        ris_element_positions=ris_grid(config.N, config.wavelength),
    )


def sample_path_response(config: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    """Diagonal path-gain vector for the transmitter-to-surface link.

    Tap 1 carries the line-of-sight share k/(k+1) of the total power
    P0 * d^-nu1; the remaining power is split evenly over the other taps.
    With a single path the line-of-sight tap absorbs all power.
    """
    lp = config.num_paths
    d = float(np.linalg.norm(np.asarray(config.bs_pos) - np.asarray(config.ris_pos)))
    total = config.P0 * d ** (-config.nu1)
    kap = config.rician_k
    var = np.empty(lp)
    if lp == 1:
        var[0] = total
    else:
        var[0] = kap / (kap + 1.0) * total
        var[1:] = total / (kap + 1.0) / (lp - 1)
    w = rng.normal(size=lp) + 1j * rng.normal(size=lp)
    return np.sqrt(var / 2.0) * w


def los_steering(geometry: PathGeometry, ris_pos, user_pos, wavelength: float) -> np.ndarray:
    """Line-of-sight array response of the grid toward an in-plane user."""
    d = np.asarray(user_pos, dtype=float) - np.asarray(ris_pos, dtype=float)
    d = d / np.linalg.norm(d)
    azim = float(np.arccos(np.clip(d[0], -1.0, 1.0)))
    return frv_grid(geometry.ris_element_positions, np.pi / 2.0, azim, wavelength)


def frv_grid(points: np.ndarray, elev: float, azim: float, wavelength: float) -> np.ndarray:
    chi = points[:, 0] * np.sin(elev) * np.cos(azim) + points[:, 1] * np.cos(elev)
    return np.exp(2j * np.pi / wavelength * chi)


def sample_ris_user_channels(config: SystemConfig, user_positions: np.ndarray,
                             rng: np.random.Generator,
                             geometry: PathGeometry | None = None) -> np.ndarray:
    """Rician user channels: scaled LoS steering plus a CN(0, I) tail."""
    geo = geometry if geometry is not None else PathGeometry(
        tx_elev=np.zeros(config.L_t), tx_azim=np.zeros(config.L_t),
        rx_elev=np.zeros(config.L_r), rx_azim=np.zeros(config.L_r),
        ris_element_positions=ris_grid(config.N, config.wavelength))
    kap = config.rician_k
    out = np.empty((user_positions.shape[0], config.N), dtype=complex)
    for m, pos in enumerate(user_positions):
        dist = float(np.linalg.norm(np.asarray(pos) - np.asarray(config.ris_pos)))
        if dist <= 0:
            raise InvariantViolation("user at zero distance from the surface")
        gain = config.P0 * dist ** (-config.nu2)
        a_los = los_steering(geo, config.ris_pos, pos, config.wavelength)
        w = (rng.normal(size=config.N) + 1j * rng.normal(size=config.N)) / np.sqrt(2.0)
        out[m] = np.sqrt(gain) * (np.sqrt(kap / (kap + 1.0)) * a_los
                                  + np.sqrt(1.0 / (kap + 1.0)) * w)
    return out


def sample_user_positions(config: SystemConfig, rng: np.random.Generator) -> np.ndarray:
    r = config.user_radius * np.sqrt(rng.uniform(size=config.M))
    th = rng.uniform(0, 2 * np.pi, config.M)
    centre = np.asarray(config.user_center)
    return centre[None, :] + np.column_stack([r * np.cos(th), r * np.sin(th)])


# ---------------------------------------------------------------------------
# cascaded channels
# ---------------------------------------------------------------------------


def bs_ris_channel(realization: ChannelRealization, positions: np.ndarray) -> np.ndarray:
    """Cascaded transmitter-to-surface channel, (N, L)."""
    cfg = realization.config
    geo = realization.geometry
    f_t = frm(positions, geo.tx_elev, geo.tx_azim, cfg.wavelength)
    f_r = frm(geo.ris_element_positions, geo.rx_elev, geo.rx_azim, cfg.wavelength)
    return f_r.conj().T @ (realization.path_gains[:, None] * f_t)


def effective_user_channel(realization: ChannelRealization, positions: np.ndarray,
                           v: np.ndarray, m: int) -> np.ndarray:
    """End-to-end channel column g_m; the receive row is g_m^H = h^H diag(v) H."""
    h = realization.h_ris_user[m]
    hh = bs_ris_channel(realization, positions)
    return hh.conj().T @ (np.conj(v) * h)


def estimated_covariance(realization: ChannelRealization, positions: np.ndarray,
                         v: np.ndarray, m: int) -> np.ndarray:
    """Rank-one covariance g g^H of the estimated end-to-end channel."""
    g = effective_user_channel(realization, positions, v, m)
    return np.outer(g, g.conj())


def sample_error_in_ball(radius: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the complex ball of the given radius."""
    if radius < 0:
        raise InvariantViolation("radius must be nonnegative")
    w = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    nrm = np.linalg.norm(w)
    if nrm == 0:
        return np.zeros(dim, dtype=complex)
    r = radius * rng.uniform() ** (1.0 / (2 * dim))
    return (r / nrm) * w


def new_realization(config: SystemConfig, rng: np.random.Generator) -> ChannelRealization:
    """Draw one full channel realization and freeze the uncertainty radii."""
    geo = sample_path_geometry(config, rng)
    gains = sample_path_response(config, rng)
    users = sample_user_positions(config, rng)
    h = sample_ris_user_channels(config, users, rng, geometry=geo)
    partial = ChannelRealization(
        config=config, geometry=geo, path_gains=gains, h_ris_user=h,
        user_positions=users, rho_hat=np.zeros(config.M),
        cov_snapshot=np.zeros((config.M, config.L, config.L), dtype=complex))
    t0 = initial_antenna_grid(config)
    v0 = np.ones(config.N, dtype=complex)
    cov = np.stack([estimated_covariance(partial, t0, v0, m) for m in range(config.M)])
    # spectral norm of a rank-one covariance is the squared channel norm
    rho_hat = np.sqrt(config.rho * np.linalg.norm(cov, ord=2, axis=(1, 2)))
    partial.cov_snapshot = cov
    partial.rho_hat = rho_hat
    return partial
