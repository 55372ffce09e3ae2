import csv
import io

import numpy as np
import pytest

import oracles
from conftest import calibrate, tiny_config
from spikehalt import tensor as T
from spikehalt.block import Block
from spikehalt.energy import OpCount, conv_counts, count_ops, estimate_energy, linear_counts
from spikehalt.model import SpikeHaltNet
from spikehalt.neuron import reset_states
from spikehalt.tensor import Tensor


def test_hand_counted_linear():
    x = np.array([[1.0, 0.0, 1.0, 0.0]])
    flops, sops, spikes, slots = linear_counts(x, 3, True)
    assert (flops, sops, spikes, slots) == (12, 6, 2, 4)
    c = OpCount()
    c.add_spiking("fc", flops, sops, spikes, slots)
    assert c.total_sops == 6 and c.layers["fc"].spike_rate == 0.5
    assert linear_counts(np.zeros((5, 4)), 3, True)[1] == 0


def test_masked_rows_are_not_counted():
    x = np.ones((2, 4, 8))
    active = np.array([[1, 0, 1, 0], [1, 1, 0, 0]], dtype=bool)
    full = linear_counts(x, 5, True)
    half = linear_counts(x, 5, True, active)
    assert half[1] * 2 == full[1] and half[0] * 2 == full[0]


def test_conv_sops_match_loop_oracle():
    rng = np.random.default_rng(0)
    for stride, pad, k in [(1, 1, 3), (2, 1, 3), (1, 0, 3), (2, 0, 2)]:
        x = (rng.random((2, 3, 7, 7)) < 0.3).astype(np.float32)
        flops, sops, spikes, slots = conv_counts(x, 5, k, stride, pad, True)
        assert sops == oracles.conv_sops(x, 5, k, stride, pad)
        assert spikes == int(x.sum()) and slots == x.size
        assert sops <= flops


def test_real_input_conv_counts_macs_only():
    flops, sops, _, _ = conv_counts(np.random.default_rng(1).random((1, 3, 8, 8)), 4, 3, 1, 1, False)
    assert flops == 8 * 8 * 4 * 3 * 9 and sops == 0


def test_energy_examples():
    c = OpCount()
    c.add_spiking("x", 0, 10 ** 6, 0, 0)
    assert estimate_energy(c) == pytest.approx(0.9e-6, rel=1e-12)
    c.add_dense("head", 1000)
    e = estimate_energy(c)
    assert e == pytest.approx(0.9e-6 + 4.6e-9, rel=1e-12)
    doubled = OpCount().merge(c).merge(c)
    assert estimate_energy(doubled) == pytest.approx(2 * e, rel=1e-12)
    assert estimate_energy(c, e_mac=0, e_ac=0) == 0
    with pytest.raises(ValueError):
        estimate_energy(c, e_ac=-1)
    with pytest.raises(ValueError):
        estimate_energy(c, e_mac=-0.1)


def test_halving_slots_halves_block_sops():
    blk = Block(16, 2, np.random.default_rng(0), mlp_ratio=2.0)
    blk.eval()
    row = (np.random.default_rng(1).random(16) < 0.5).astype(np.float32)
    x = np.tile(row, (1, 8, 1))
    counts = []
    for mask in (None, np.arange(8)[None, :] % 2 == 0):
        c = OpCount()
        reset_states(blk)
        with T.no_grad():
            blk(Tensor(x), mask, c)
        counts.append(c.total_sops)
    assert counts[0] > 0 and counts[1] * 2 == counts[0]


def test_model_counts_and_csv():
    x = np.random.default_rng(2).normal(size=(2, 3, 8, 8)).astype(np.float32)
    m = calibrate(SpikeHaltNet(tiny_config()), x)
    m.train()
    a, b = count_ops(m, x), count_ops(m, x)
    assert a.to_csv() == b.to_csv()
    assert m.training is True
    for lc in a.layers.values():
        assert lc.sops <= lc.flops
        assert isinstance(lc.sops, int) and isinstance(lc.macs, int)
    rows = list(csv.DictReader(io.StringIO(a.to_csv())))
    assert [r["layer"] for r in rows] == list(a.layers)
    assert count_ops(m, x, halting=False).layers["block.1.q"].sops > 0
    assert {"layer", "flops", "sops", "spike_rate"} <= set(rows[0])
    # the pixel-fed conv is the only real-valued conv
    assert a.conv_macs == a.layers["embed.0.conv"].macs > 0


def test_energy_non_increasing_in_eps():
    x = np.random.default_rng(3).normal(size=(4, 3, 8, 8)).astype(np.float32)
    m = calibrate(SpikeHaltNet(tiny_config(timesteps=3, blocks=3)), x, passes=10)
    energies = [estimate_energy(count_ops(m, x, eps=e)) for e in (0, 0.05, 0.2, 0.5, 1.0)]
    assert all(b <= a for a, b in zip(energies, energies[1:]))
    assert energies[-1] < energies[0]


def test_i_sps_conv_macs_are_one_over_t():
    counts = {}
    for mode in ("i_sps", "vanilla_sps"):
        m = SpikeHaltNet(tiny_config(timesteps=4, embed_mode=mode))
        counts[mode] = count_ops(m, np.ones((1, 3, 8, 8), np.float32))
    assert counts["vanilla_sps"].conv_macs == 4 * counts["i_sps"].conv_macs
