"""Unit conversions applied at the I/O boundary.

Internal units are Hz, meV, ps and mW.
"""
from __future__ import annotations

import numpy as np

# hc in meV·nm
HC_MEV_NM = 1.23984193e6

PS_PER_S = 1e12

FREQUENCY_SCALE = {"HZ": 1.0, "KHZ": 1e3, "MHZ": 1e6, "GHZ": 1e9}


def nm_to_mev(wavelength_nm):
    wavelength_nm = np.asarray(wavelength_nm, dtype=float)
    if np.any(wavelength_nm <= 0):
        raise ValueError("wavelength must be positive")
    return HC_MEV_NM / wavelength_nm


def mev_to_nm(energy_mev):
    energy_mev = np.asarray(energy_mev, dtype=float)
    if np.any(energy_mev <= 0):
        raise ValueError("energy must be positive")
    return HC_MEV_NM / energy_mev


def dbm_to_mw(p_dbm):
    return np.power(10.0, np.asarray(p_dbm, dtype=float) / 10.0)


def mw_to_dbm(p_mw):
    p_mw = np.asarray(p_mw, dtype=float)
    if np.any(p_mw <= 0):
        raise ValueError("power must be positive to express in dBm")
    return 10.0 * np.log10(p_mw)
