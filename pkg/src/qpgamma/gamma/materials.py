"""Coarse photon attenuation data for the handful of materials in the model.

Total mass attenuation coefficients (cm^2/g) are transcribed at four
significant figures or fewer from the NIST XCOM / Hubbell–Seltzer tables
(NaI is a mass-weighted Na + I mixture).  The incoherent part is taken from
the free-electron Klein–Nishina cross section; the remainder of the total is
treated as absorption (photoelectric, plus the small coherent and pair parts,
which this physics list does not model separately).  Interpolation is linear
in log-log space; absorption edges are stored as repeated energies.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_A = 6.02214076e23
R_E_CM = 2.8179403262e-13
MEC2 = 0.51099895  # MeV

_E = [0.010, 0.015, 0.020, 0.030, 0.040, 0.050, 0.060, 0.080, 0.100, 0.150, 0.200,
      0.300, 0.400, 0.500, 0.600, 0.800, 1.000, 1.250, 1.500, 2.000, 3.000]

_TABLES = {
    "Si": (2.329, 14 / 28.086, _E, [
        33.89, 10.34, 4.464, 1.436, 0.7012, 0.4385, 0.3207, 0.2228, 0.1835, 0.1448, 0.1275,
        0.1082, 0.09614, 0.08748, 0.08077, 0.07082, 0.06361, 0.05688, 0.05183, 0.04480, 0.03678]),
    "Al": (2.699, 13 / 26.982, _E, [
        26.23, 7.955, 3.441, 1.128, 0.5685, 0.3681, 0.2778, 0.2018, 0.1704, 0.1378, 0.1223,
        0.1042, 0.09276, 0.08445, 0.07802, 0.06841, 0.06146, 0.05496, 0.05006, 0.04324, 0.03541]),
    "Cu": (8.96, 29 / 63.546, _E, [
        215.9, 74.05, 33.79, 10.92, 4.862, 2.613, 1.593, 0.7630, 0.4584, 0.2217, 0.1559,
        0.1119, 0.09413, 0.08362, 0.07625, 0.06605, 0.05901, 0.05261, 0.04803, 0.04205, 0.03599]),
    "Pb": (11.35, 82 / 207.2,
           [0.010, 0.015, 0.020, 0.030, 0.040, 0.050, 0.060, 0.080, 0.08800, 0.08800, 0.100, 0.150,
            0.200, 0.300, 0.400, 0.500, 0.600, 0.800, 1.000, 1.250, 1.500, 2.000, 3.000],
           [130.6, 111.6, 86.36, 30.32, 14.36, 8.041, 5.021, 2.419, 1.910, 7.683, 5.549, 2.014,
            0.9985, 0.4031, 0.2323, 0.1614, 0.1248, 0.08870, 0.07102, 0.05876, 0.05222, 0.04606, 0.04234]),
    "NaI": (3.667, (11 + 53) / (22.990 + 126.904),
            [0.010, 0.015, 0.020, 0.030, 0.03317, 0.03317, 0.040, 0.050, 0.060, 0.080, 0.100, 0.150,
             0.200, 0.300, 0.400, 0.500, 0.600, 0.800, 1.000, 1.250, 1.500, 2.000, 3.000],
            [138.0, 47.0, 20.3, 7.00, 5.40, 30.6, 18.8, 10.5, 6.47, 3.00, 1.67, 0.580,
             0.300, 0.137, 0.0980, 0.0805, 0.0719, 0.0622, 0.0570, 0.0507, 0.0468, 0.0416, 0.0362]),
}


def klein_nishina_sigma(E):
    """Total Klein–Nishina cross section per electron (cm^2), E in MeV."""
    k = np.asarray(E, dtype=float) / MEC2
    l2k = np.log1p(2 * k)
    a = (1 + k) / k**2 * (2 * (1 + k) / (1 + 2 * k) - l2k / k)
    b = l2k / (2 * k) - (1 + 3 * k) / (1 + 2 * k) ** 2
    return 2 * np.pi * R_E_CM**2 * (a + b)


@dataclass(frozen=True)
class Material:
    name: str
    density: float  # g/cm^3
    z_over_a: float
    log_e: np.ndarray
    log_mu: np.ndarray

    def mu_total(self, E):
        """Linear attenuation coefficient in 1/m for photon energy E (MeV)."""
        le = np.log(np.clip(E, 1e-3, 3.0))
        mu_rho = np.exp(np.interp(le, self.log_e, self.log_mu))
        return mu_rho * self.density * 100.0

    def mu_compton(self, E):
        sig = klein_nishina_sigma(np.clip(E, 1e-3, 3.0))
        return sig * N_A * self.z_over_a * self.density * 100.0

    def coefficients(self, E):
        """(mu_total, photoelectric fraction), both arrays."""
        tot = self.mu_total(E)
        comp = np.minimum(self.mu_compton(E), tot)
        return tot, (tot - comp) / tot


def _build(name: str) -> Material:
    rho, za, e, mu = _TABLES[name]
    e = np.array(e, dtype=float)
    # separate repeated edge energies so interpolation stays single-valued
    for i in range(1, len(e)):
        if e[i] <= e[i - 1]:
            e[i] = e[i - 1] * (1 + 1e-9)
    return Material(name, rho, za, np.log(e), np.log(np.array(mu, dtype=float)))


MATERIALS = {name: _build(name) for name in _TABLES}


def material(name: str) -> Material:
    return MATERIALS[name]


# ---------------------------------------------------------------------------
# electron range (Katz–Penfold), used for escape from thin volumes

_RANGE_E = np.geomspace(1e-3, 3.0, 400)


def electron_range_gcm2(E):
    """Practical electron range in g/cm^2 for kinetic energy E (MeV)."""
    E = np.maximum(np.asarray(E, dtype=float), 1e-6)
    n = 1.265 - 0.0954 * np.log(E)
    return 0.412 * E**n


_RANGE_R = electron_range_gcm2(_RANGE_E)


def electron_energy_from_range(R):
    """Inverse of :func:`electron_range_gcm2` (R in g/cm^2, returns MeV)."""
    R = np.asarray(R, dtype=float)
    out = np.exp(np.interp(np.log(np.maximum(R, 1e-30)), np.log(_RANGE_R), np.log(_RANGE_E)))
    return np.where(R <= 0, 0.0, out)
