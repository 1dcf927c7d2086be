"""Analytical Energy Model

Hardware-agnostic operation and memory-access counts for a dense ANN layer
and a dense VSN layer, their energies, the ANN/VSN energy-ratio curve over
input spiking activity, and the spiking-activity metric.
"""

from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from utils.errors import InvalidInputError
from utils.neuralcore import VsnForwardRecord


@dataclass
class LayerShape:
    """One fully connected layer

    Attributes:
        n_in, n_out: Input and output widths
        t_s: Spike time steps
        alpha_in: Average input spiking activity per time step, in [0, 1]
        theta_out: Output spikes; defaults to n_out * t_s (every node fires)
    """

    n_in: int
    n_out: int
    t_s: int = 1
    alpha_in: float = 1.0
    theta_out: Optional[float] = None

    def __post_init__(self):
        if self.n_in < 1 or self.n_out < 1 or self.t_s < 1:
            raise InvalidInputError("Layer widths and spike steps must be at least 1")
        if not 0.0 <= self.alpha_in <= 1.0:
            raise InvalidInputError(f"alpha_in must lie in [0, 1], got {self.alpha_in}")
        if self.theta_out is None:
            self.theta_out = float(self.n_out * self.t_s)

    @property
    def theta_in(self) -> float:
        """Expected input spikes N_in * T_s * alpha_in"""
        return self.n_in * self.t_s * self.alpha_in


@dataclass
class OpCounts:
    mac: float = 0.0
    acc: float = 0.0
    rd: float = 0.0
    wr: float = 0.0

    def __add__(self, other: 'OpCounts') -> 'OpCounts':
        return OpCounts(self.mac + other.mac, self.acc + other.acc, self.rd + other.rd, self.wr + other.wr)


@dataclass
class EnergyParams:
    """Energy per operation in pJ"""

    e_mac: float = 3.1
    e_acc: float = 0.1
    e_rd: float = 5.0
    e_wr: float = 5.0

    def __post_init__(self):
        if min(self.e_mac, self.e_acc, self.e_rd, self.e_wr) <= 0:
            raise InvalidInputError("Energy per operation must be positive")

    def scaled(self, factor: float) -> 'EnergyParams':
        return EnergyParams(*(factor * v for v in asdict(self).values()))


def sram_access_energy(capacity_kb: float, table: Dict[float, float]) -> float:
    """Per-access SRAM energy (pJ) interpolated from a capacity -> energy table"""
    if not table:
        raise InvalidInputError("SRAM energy table is empty")
    capacities = np.array(sorted(float(c) for c in table))
    energies = np.array([float(table[c]) for c in sorted(table, key=float)])
    return float(np.interp(capacity_kb, capacities, energies))


def ann_layer_counts(shape: LayerShape) -> OpCounts:
    """Dense layer: one MAC per weight, bias plus indexing accumulates"""
    n_in, n_out = shape.n_in, shape.n_out
    return OpCounts(
        mac=float(n_in * n_out),
        acc=float(n_out + (n_in + n_out)),
        rd=float(n_in + (n_in + 1) * n_out),
        wr=float(n_out),
    )


def vsn_layer_counts(shape: LayerShape) -> OpCounts:
    """VSN layer: work driven by input spikes plus per-step leak and state traffic"""
    theta, t_s, n_out = shape.theta_in, shape.t_s, shape.n_out
    return OpCounts(
        mac=theta * n_out + t_s * n_out,
        acc=2.0 * t_s * n_out + theta * n_out,
        rd=theta + (theta + 1.0) * n_out + t_s * n_out + 2.0 * n_out,
        wr=shape.theta_out + t_s * n_out,
    )


def layer_energy(counts: OpCounts, params: EnergyParams) -> float:
    """E_ops + E_mem in pJ"""
    e_ops = params.e_mac * counts.mac + params.e_acc * counts.acc
    e_mem = params.e_rd * counts.rd + params.e_wr * counts.wr
    return float(e_ops + e_mem)


def energy_ratio_curve(n_in: int, n_out: int, t_s: int, params: EnergyParams,
                       activity: Sequence[float],
                       theta_out: Optional[float] = None) -> Tuple[pd.DataFrame, Optional[float]]:
    """E_ANN / E_VSN over a grid of input spiking activities

    Args:
        n_in, n_out: Layer widths
        t_s: Spike time steps of the VSN layer
        params: Per-operation energies
        activity: Activity grid in [0, 1]
        theta_out: Optional measured output spike count

    Returns:
        Tuple of (frame with alpha, e_ann_pj, e_vsn_pj, ratio) and the parity
        crossover alpha* where ratio = 1 (None if the ratio never crosses 1)
    """
    alphas = np.asarray(activity, dtype=float)
    if alphas.size == 0 or alphas.min() < 0 or alphas.max() > 1:
        raise InvalidInputError("Activity grid must be non-empty and within [0, 1]")
    e_ann = layer_energy(ann_layer_counts(LayerShape(n_in, n_out, t_s)), params)
    e_vsn = np.array([
        layer_energy(vsn_layer_counts(LayerShape(n_in, n_out, t_s, a, theta_out)), params) for a in alphas
    ])
    ratio = e_ann / e_vsn
    frame = pd.DataFrame({'alpha': alphas, 'e_ann_pj': e_ann, 'e_vsn_pj': e_vsn, 'ratio': ratio})
    return frame, parity_crossover(alphas, ratio)


def parity_crossover(alphas: np.ndarray, ratio: np.ndarray) -> Optional[float]:
    """First alpha where the ratio falls to 1, linearly interpolated"""
    above = ratio - 1.0
    for i in range(len(alphas) - 1):
        if above[i] >= 0 >= above[i + 1] and above[i] != above[i + 1]:
            w = above[i] / (above[i] - above[i + 1])
            return float(alphas[i] + w * (alphas[i + 1] - alphas[i]))
    return None


def spiking_activity(record: VsnForwardRecord, shape: Optional[LayerShape] = None) -> float:
    """100 * spikes / (neurons x time steps x samples) for one VSN layer"""
    slots = record.slots
    if shape is not None and record.mask.shape[-1] != shape.n_out:
        raise InvalidInputError("Record width does not match the layer shape")
    if slots == 0:
        return 0.0
    return 100.0 * record.spike_count / slots


def network_energy(shapes: List[LayerShape], params: EnergyParams) -> pd.DataFrame:
    """Per-layer ANN vs VSN energy of a layer stack plus a 'total' row"""
    rows = []
    for i, shape in enumerate(shapes):
        e_ann = layer_energy(ann_layer_counts(shape), params)
        e_vsn = layer_energy(vsn_layer_counts(shape), params)
        rows.append({'layer': str(i), 'n_in': shape.n_in, 'n_out': shape.n_out,
                     'alpha_in': shape.alpha_in, 'e_ann_pj': e_ann, 'e_vsn_pj': e_vsn})
    frame = pd.DataFrame(rows)
    total = {'layer': 'total', 'n_in': np.nan, 'n_out': np.nan, 'alpha_in': np.nan,
             'e_ann_pj': frame['e_ann_pj'].sum(), 'e_vsn_pj': frame['e_vsn_pj'].sum()}
    frame = pd.concat([frame, pd.DataFrame([total])], ignore_index=True)
    frame['ratio'] = frame['e_ann_pj'] / frame['e_vsn_pj']
    return frame
