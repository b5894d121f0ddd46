from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from core.corrections import (
    CORR_HEADER,
    CorrectionsFormatError,
    CorrectionsSet,
    read_corrections,
    write_corrections,
    write_corrections_table,
)
from core.geometry import AnchorChain


def _sample_set(seed: int = 0) -> CorrectionsSet:
    rng = np.random.default_rng(seed)
    chains = {
        0: AnchorChain(0, rng.normal(size=(5, 6)) * 0.01, spacing=0.5, arc_origin=-1.0),
        3: AnchorChain(3, rng.normal(size=(3, 6)) * 0.01, spacing=0.25, arc_origin=2.0),
    }
    std = {0: np.abs(rng.normal(size=(5, 6))) * 1e-3, 3: np.abs(rng.normal(size=(3, 6))) * 1e-3}
    return CorrectionsSet(chains, iteration=4, std=std)


def test_zero_set_covers_arc_ranges():
    corr = CorrectionsSet.zeros({1: (0.2, 10.1), 0: (-3.0, 3.0)}, spacing=0.5)
    assert corr.trajectory_ids == [0, 1]
    assert corr.chain(1).arc_origin == 0.0
    assert corr.chain(1).arc_end >= 10.1
    assert corr.chain(0).arc_origin == -3.0
    assert np.array_equal(corr.std[0], np.zeros((corr.chain(0).n, 6)))
    assert corr.iteration == 0


def test_unknown_trajectory_raises_key_error():
    with pytest.raises(KeyError):
        CorrectionsSet.zeros({0: (0.0, 1.0)}).chain(5)


def test_mismatched_chain_key_rejected():
    with pytest.raises(ValueError):
        CorrectionsSet({2: AnchorChain.zeros(1, 3)})


def test_accumulate_adds_increments_and_counts_iterations():
    base = CorrectionsSet.zeros({0: (0.0, 2.0)})
    x = np.full((2, 6), 0.001)
    std = np.full((2, 6), 0.002)
    once = base.accumulate({0: (1, x, std)})
    twice = once.accumulate({0: (1, x, std)})
    assert twice.iteration == 2
    assert np.allclose(twice.chain(0).values[1:3], 0.002)
    assert np.array_equal(twice.chain(0).values[0], np.zeros(6))
    assert np.array_equal(twice.std[0][1:3], std)
    assert np.array_equal(base.chain(0).values, np.zeros((base.chain(0).n, 6)))


def test_accumulate_rejects_out_of_chain_increment():
    base = CorrectionsSet.zeros({0: (0.0, 1.0)})
    with pytest.raises(ValueError):
        base.accumulate({0: (2, np.zeros((3, 6)), np.zeros((3, 6)))})


def test_zero_corrections_leave_points_bit_exact():
    rng = np.random.default_rng(1)
    corr = CorrectionsSet.zeros({0: (0.0, 20.0), 1: (0.0, 20.0)})
    xyz = rng.normal(size=(200, 3)) * 30.0
    t0 = rng.normal(size=(200, 3))
    arc = rng.uniform(0.0, 20.0, 200)
    tids = rng.integers(0, 2, 200)
    out, ok, _, _ = corr.correct(xyz, t0, arc, tids)
    assert ok.all()
    assert np.array_equal(out, xyz)


def test_translation_correction_moves_points():
    corr = CorrectionsSet.zeros({0: (0.0, 2.0)})
    corr.chain(0).values[:, 2] = 0.05
    xyz = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    out, ok, idx, alpha = corr.correct(xyz, np.zeros((2, 3)), np.array([0.25, 5.0]), np.array([0, 0]))
    assert ok.tolist() == [True, False]
    assert np.allclose(out[0], [1.0, 2.0, 3.05])
    assert np.array_equal(out[1], xyz[1])
    assert (int(idx[0]), float(alpha[0])) == (0, 0.5)


def test_serialization_round_trip(tmp_path: Path):
    corr = _sample_set()
    path = tmp_path / "c.bin"
    write_corrections(corr, path)
    back = read_corrections(path)
    assert back.iteration == 4
    assert back.trajectory_ids == [0, 3]
    for tid in (0, 3):
        assert np.array_equal(back.chain(tid).values, corr.chain(tid).values)
        assert np.array_equal(back.std[tid], corr.std[tid])
        assert back.chain(tid).spacing == corr.chain(tid).spacing
        assert back.chain(tid).arc_origin == corr.chain(tid).arc_origin
    assert back.provenance == corr.provenance


def test_serialization_is_deterministic():
    assert _sample_set(2).to_bytes() == _sample_set(2).to_bytes()
    assert _sample_set(2).provenance != _sample_set(3).provenance


def test_checksum_detects_corruption():
    data = bytearray(_sample_set().to_bytes())
    data[CORR_HEADER.size + 40] ^= 0x01
    with pytest.raises(CorrectionsFormatError):
        CorrectionsSet.from_bytes(bytes(data))


def test_truncated_payload_rejected():
    with pytest.raises(CorrectionsFormatError):
        CorrectionsSet.from_bytes(b"LSACORR\x00")


def test_table_lists_every_anchor(tmp_path: Path):
    corr = _sample_set()
    path = tmp_path / "c.csv"
    assert write_corrections_table(corr, path) == 8
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 8
    assert rows[5]["trajectory_id"] == "3"
    assert float(rows[5]["arc"]) == pytest.approx(2.0)
    assert float(rows[0]["tz"]) == pytest.approx(corr.chain(0).values[0, 2])
    assert float(rows[0]["std_kappa"]) == pytest.approx(corr.std[0][0, 5])
