"""Overdamped Brownian dynamics of quadrupole-confined colloidal particles.

Reduced units throughout the dynamics: lengths in particle radii ``a``,
energies in ``kT``, time in ``a**2 / D0``; the bare diffusivity ``D0`` and
``kT`` are both 1 by default.  Physical inputs (particle radius, Debye
length, electrode gap, voltage) are converted once into the reduced
interaction constants ``kappa``, ``lambda`` and ``d_g``.

Interactions per particle pair / particle:
  * screened electrostatic repulsion  ``B_pp * exp(-kappa * (r - 2))``
  * dipole-field confinement          ``-2 kT lam / f_cm * (4 r / d_g)**2``
  * dipole-dipole coupling, with the local field direction and magnitude
    taken at the pair midpoint (radial about the quadrupole center).

Forces are analytic negative gradients of the total energy.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

EPS0 = 8.8541878128e-12  # vacuum permittivity, F/m
KB = 1.380649e-23        # Boltzmann constant, J/K
V_XTAL = 1.89            # crystallization voltage used to normalize V*, volts

OVERLAP_FLOOR = 0.1      # pair distances below this (units of a) are an error


class OverlapError(ValueError):
    """Raised when a particle pair falls below the overlap floor."""

    def __init__(self, i, j, r):
        self.pair = (int(i), int(j))
        self.distance = float(r)
        super().__init__(
            f"particles {int(i)} and {int(j)} overlap: r = {r:.6g} a "
            f"< floor {OVERLAP_FLOOR} a"
        )


@dataclass
class PhysicalParams:
    """Physical parameter set; desk-scale defaults, full-scale via `full_scale`.

    ``radius_a``, ``kappa_inv`` and ``d_g`` are in nanometres; ``B_pp`` in kT;
    ``V_pp`` in volts.  ``temperature_kT`` and ``D0`` are the reduced energy
    and diffusivity units and normally stay 1.
    """

    n_particles: int = 30
    radius_a: float = 1400.0
    temperature_kT: float = 1.0
    f_cm: float = -0.4667
    kappa_inv: float = 100.0
    B_pp: float = 3216.5
    V_star: float = 0.8
    V_pp: float = field(default=None)
    d_g: float = 1.0e5
    eps_m: float = 80.1
    D0: float = 1.0
    temperature_c: float = 20.0

    def __post_init__(self):
        if self.V_pp is None:
            self.V_pp = self.V_star * V_XTAL
        for name in ("radius_a", "d_g", "D0", "kappa_inv"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_particles < 1:
            raise ValueError("n_particles must be at least 1")
        if abs(self.V_pp - self.V_star * V_XTAL) > 1e-9 * V_XTAL:
            raise ValueError(
                f"V_pp = {self.V_pp} inconsistent with V_star = {self.V_star} "
                f"(V_xtal = {V_XTAL} V)"
            )
        lam = self.lam
        if not (np.isfinite(lam) and lam >= 0.0):
            raise ValueError(f"field amplitude lambda = {lam} must be finite and >= 0")

    @classmethod
    def full_scale(cls, **overrides):
        """Parameter set at the full tabulated scale (N=210, 10 nm screening)."""
        base = dict(n_particles=210, kappa_inv=10.0)
        base.update(overrides)
        return cls(**base)

    def with_voltage(self, v_star: float) -> "PhysicalParams":
        return replace(self, V_star=v_star, V_pp=v_star * V_XTAL)

    # -- reduced interaction constants ------------------------------------

    @property
    def kappa(self) -> float:
        """Inverse screening length in units of 1/a."""
        return self.radius_a / self.kappa_inv

    @property
    def d_g_reduced(self) -> float:
        """Electrode gap in units of a."""
        return self.d_g / self.radius_a

    @property
    def E0(self) -> float:
        """Field normalization constant, V/m."""
        return self.V_pp / (math.sqrt(8.0) * self.d_g * 1e-9)

    @property
    def lam(self) -> float:
        """Dimensionless field-coupling amplitude."""
        a_m = self.radius_a * 1e-9
        kT_joule = KB * (self.temperature_c + 273.15)
        return math.pi * EPS0 * self.eps_m * a_m**3 * (self.f_cm * self.E0) ** 2 / kT_joule

    def params_hash(self) -> str:
        payload = "|".join(
            f"{k}={getattr(self, k)!r}"
            for k in (
                "n_particles", "radius_a", "temperature_kT", "f_cm", "kappa_inv",
                "B_pp", "V_star", "V_pp", "d_g", "eps_m", "D0", "temperature_c",
            )
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass
class ParticleConfiguration:
    """Planar particle positions (units of a) at one instant."""

    positions: np.ndarray
    params_ref: str = ""
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float)
        if self.positions.ndim != 2 or self.positions.shape[1] != 2:
            raise ValueError("positions must be an (N, 2) array")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    @property
    def n(self) -> int:
        return self.positions.shape[0]


@dataclass
class Trajectory:
    """Frames saved at a fixed interval."""

    frames: list
    save_interval: float

    def __post_init__(self):
        times = np.array([f.time for f in self.frames])
        if len(times) > 1:
            dts = np.diff(times)
            if not np.allclose(dts, self.save_interval, rtol=1e-9, atol=1e-12):
                raise ValueError("frame times must increase by save_interval")

    def positions_array(self) -> np.ndarray:
        return np.stack([f.positions for f in self.frames])

    def times(self) -> np.ndarray:
        return np.array([f.time for f in self.frames])


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------

def pair_electrostatic_energy(r_ij, p: PhysicalParams):
    """Screened double-layer repulsion  B_pp * exp(-kappa (r - 2))  in kT."""
    r = np.asarray(r_ij, dtype=float)
    if not np.all(np.isfinite(r)) or np.any(r <= 0):
        raise ValueError("pair distance must be finite and positive")
    return p.B_pp * np.exp(-p.kappa * (r - 2.0))


def dipole_field_energy(r_i, p: PhysicalParams):
    """Dipole-field confinement energy at position ``r_i`` (2-vector), in kT.

    The local field magnitude is the quadrupole-center approximation
    ``|E/E0| = 4 r / d_g`` with ``r`` the distance from the center.
    """
    pos = np.asarray(r_i, dtype=float)
    if not np.all(np.isfinite(pos)):
        raise ValueError("position must be finite")
    if p.f_cm == 0.0:
        raise ValueError("f_cm must be nonzero")
    r2 = (pos * pos).sum(axis=-1)
    return -2.0 * p.temperature_kT * p.lam / p.f_cm * (16.0 / p.d_g_reduced**2) * r2


def dipole_dipole_energy(r_i, r_j, p: PhysicalParams):
    """Induced dipole-dipole pair energy, in kT.

    The field direction and magnitude are evaluated at the pair midpoint
    (radial about the quadrupole center), which keeps the energy symmetric
    under particle exchange.  With ``m`` the midpoint and ``s`` the
    separation this is ``-lam * P2(s_hat . m_hat) * (2/r)**3 * (4|m|/d_g)**2``.
    """
    ri = np.asarray(r_i, dtype=float)
    rj = np.asarray(r_j, dtype=float)
    s = ri - rj
    r2 = (s * s).sum(axis=-1)
    if np.any(r2 == 0.0):
        raise ValueError("coincident particles in dipole-dipole energy")
    r = np.sqrt(r2)
    m = 0.5 * (ri + rj)
    sm = (s * m).sum(axis=-1)
    mm = (m * m).sum(axis=-1)
    # P2(cos theta) * |m|^2 = (3 (s_hat.m)^2 - |m|^2) / 2, smooth at m = 0
    a = 0.5 * (3.0 * (sm / r) ** 2 - mm)
    c = 16.0 / p.d_g_reduced**2
    return -p.temperature_kT * p.lam * (8.0 / r**3) * c * a


def total_energy(positions, p: PhysicalParams) -> float:
    """Total configuration energy (field + all pair terms), in kT."""
    pos = np.asarray(positions, dtype=float)
    n = pos.shape[0]
    u = float(np.sum(dipole_field_energy(pos, p)))
    if n > 1:
        iu, ju = np.triu_indices(n, 1)
        u += float(np.sum(pair_electrostatic_energy(
            np.linalg.norm(pos[iu] - pos[ju], axis=-1), p)))
        u += float(np.sum(dipole_dipole_energy(pos[iu], pos[ju], p)))
    return u


# ---------------------------------------------------------------------------
# forces
# ---------------------------------------------------------------------------

def total_forces(positions, p: PhysicalParams) -> np.ndarray:
    """Analytic forces ``-grad U`` for one configuration or a batch.

    Accepts ``(N, 2)`` or ``(B, N, 2)`` position arrays and returns forces of
    the same shape, in kT/a.  Raises :class:`OverlapError` when any pair
    distance falls below the overlap floor.
    """
    pos = np.asarray(positions, dtype=float)
    squeeze = pos.ndim == 2
    if squeeze:
        pos = pos[None]
    b, n, _ = pos.shape
    c = 16.0 / p.d_g_reduced**2
    lam = p.lam
    kT = p.temperature_kT

    # field term: -d/dr_i [-2 kT lam/f_cm c r^2] = 4 kT lam c / f_cm * r_i
    F = (4.0 * kT * lam * c / p.f_cm) * pos

    # with every interaction off the particles are independent random walkers
    if n > 1 and (p.B_pp != 0.0 or lam != 0.0):
        s = pos[:, :, None, :] - pos[:, None, :, :]
        r2 = (s * s).sum(-1)
        eye = np.eye(n, dtype=bool)
        r2[:, eye] = 1.0
        r = np.sqrt(r2)
        rmin_idx = np.argmin(r + np.where(eye, np.inf, 0.0)[None])
        bi, i, j = np.unravel_index(rmin_idx, r.shape)
        if r[bi, i, j] < OVERLAP_FLOOR:
            raise OverlapError(i, j, r[bi, i, j])

        # electrostatic repulsion
        mag = p.kappa * p.B_pp * np.exp(-p.kappa * (r - 2.0))
        mag[:, eye] = 0.0
        F = F + ((mag / r)[..., None] * s).sum(-2)

        # dipole-dipole; u_pair = pref * A / r^3 with
        # A = 3 (s.m/r)^2 - |m|^2 and pref = -4 kT lam c
        m = 0.5 * (pos[:, :, None, :] + pos[:, None, :, :])
        sm = (s * m).sum(-1)
        mm = (m * m).sum(-1)
        shat_m = sm / r
        A = 3.0 * shat_m**2 - mm
        pref = -4.0 * kT * lam * c
        dshat_m = (m + 0.5 * s) / r[..., None] - (sm / r**3)[..., None] * s
        dA = 6.0 * shat_m[..., None] * dshat_m - m
        dU = pref * (dA / (r**3)[..., None] - (3.0 * A / r**4)[..., None] * (s / r[..., None]))
        dU[:, eye, :] = 0.0
        F = F - dU.sum(-2)

    return F[0] if squeeze else F


# ---------------------------------------------------------------------------
# integration
# ---------------------------------------------------------------------------

def bd_step(c: ParticleConfiguration, dt: float, rng: np.random.Generator,
            p: PhysicalParams, forces: np.ndarray | None = None,
            noise_scale: float = 1.0) -> ParticleConfiguration:
    """One explicit Euler step of the free-draining overdamped dynamics.

    ``r(t+dt) = r(t) + (D0/kT) F dt + xi`` with ``xi ~ N(0, 2 D0 dt)`` per
    coordinate.  ``forces`` overrides the analytic force evaluation and
    ``noise_scale`` rescales the Brownian displacement (0 disables noise).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if forces is None:
        forces = total_forces(c.positions, p)
    xi = noise_scale * np.sqrt(2.0 * p.D0 * dt) * rng.standard_normal(c.positions.shape)
    new = c.positions + (p.D0 / p.temperature_kT) * forces * dt + xi
    return ParticleConfiguration(new, params_ref=c.params_ref, time=c.time + dt)


def simulate(c0: ParticleConfiguration, horizon: float, dt: float,
             save_interval: float, rng: np.random.Generator,
             p: PhysicalParams) -> Trajectory:
    """Integrate from ``c0`` for ``horizon`` time units, saving frames.

    ``save_interval`` must be an integer multiple of ``dt``.  Deterministic
    for a given generator state.
    """
    steps_per_save = save_interval / dt
    if abs(steps_per_save - round(steps_per_save)) > 1e-9 * max(1.0, steps_per_save):
        raise ValueError("save_interval must be an integer multiple of dt")
    steps_per_save = int(round(steps_per_save))
    n_saves = int(round(horizon / save_interval))

    pos = c0.positions.copy()
    t = c0.time
    frames = [ParticleConfiguration(pos.copy(), c0.params_ref, t)]
    sqrt_noise = np.sqrt(2.0 * p.D0 * dt)
    mob = p.D0 / p.temperature_kT
    for k in range(n_saves):
        for _ in range(steps_per_save):
            F = total_forces(pos, p)
            pos += mob * F * dt + sqrt_noise * rng.standard_normal(pos.shape)
        t = c0.time + (k + 1) * save_interval
        frames.append(ParticleConfiguration(pos.copy(), c0.params_ref, t))
    return Trajectory(frames, save_interval)


def burst(c: ParticleConfiguration, n_replicas: int, h: float, dt: float,
          rng: np.random.Generator, p: PhysicalParams) -> list:
    """Evolve ``n_replicas`` independent copies of ``c`` for duration ``h``.

    Each replica draws from its own child stream spawned off ``rng``; force
    evaluation is batched across replicas.  Returns endpoint configurations.
    """
    if h < dt:
        raise ValueError("burst duration h must be at least dt")
    n_steps = int(round(h / dt))
    streams = rng.spawn(n_replicas)
    pos = np.repeat(c.positions[None], n_replicas, axis=0)
    sqrt_noise = np.sqrt(2.0 * p.D0 * dt)
    mob = p.D0 / p.temperature_kT
    for _ in range(n_steps):
        F = total_forces(pos, p)
        noise = np.stack([g.standard_normal(c.positions.shape) for g in streams])
        pos += mob * F * dt + sqrt_noise * noise
    t_end = c.time + n_steps * dt
    return [ParticleConfiguration(pos[i].copy(), c.params_ref, t_end)
            for i in range(n_replicas)]


def random_disc_configuration(rng: np.random.Generator, n: int, disc_radius: float,
                              min_separation: float = 2.9,
                              params_ref: str = "") -> ParticleConfiguration:
    """Rejection-sample ``n`` positions in a disc with a minimum separation."""
    pts = []
    tries = 0
    max_tries = 200000
    while len(pts) < n:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(
                f"could not place {n} particles with separation "
                f"{min_separation} in disc radius {disc_radius}"
            )
        q = rng.uniform(-disc_radius, disc_radius, 2)
        if q @ q > disc_radius**2:
            continue
        if all((q - f) @ (q - f) >= min_separation**2 for f in pts):
            pts.append(q)
    return ParticleConfiguration(np.array(pts), params_ref=params_ref, time=0.0)
