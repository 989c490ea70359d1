import json
import shutil
import struct
from pathlib import Path

import numpy as np
import pytest

from kronadapt.adapters import full_init, kron_random_init, lora_init, pissa_init, soka_init
from kronadapt.errors import (ConsistencyError, CorruptFileError, DimensionError, FormatError,
                              VersionError)
from kronadapt.model_io import (COMPARISON_HEADER, load_adapter, load_matrix, load_spectrum,
                                matrix_bytes, read_csv, read_manifest, save_adapter, save_matrix,
                                verify_checksums, write_comparison, write_cost_reports,
                                write_curves, write_rank_decision, write_train_log)
from kronadapt.rank import RankPolicy, select_rank
from kronadapt.tensor import KronShape
from kronadapt.toybench import TrainConfig, compare_runs, make_task, train

from conftest import perturbed

GOLDEN = Path(__file__).parent / "golden"
GOLDEN_MATRIX = np.array([[1.0, -2.5, 3.0], [0.1, 1e-300, -0.0]])


def _golden_weight():
    return (np.arange(36.0).reshape(6, 6) % 7 - 3) / 4


def _tree_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir())}


# -- matrix container --------------------------------------------------------

def test_matrix_layout_is_pinned():
    want = struct.pack("<4sHQQ", b"KAMX", 1, 2, 3) + struct.pack("<6d", *GOLDEN_MATRIX.ravel())
    assert matrix_bytes(GOLDEN_MATRIX) == want
    assert (GOLDEN / "matrix_2x3.kamx").read_bytes() == want


def test_golden_matrix_loads_bit_exact():
    M = load_matrix(GOLDEN / "matrix_2x3.kamx")
    assert M.dtype == np.float64 and M.tobytes() == GOLDEN_MATRIX.tobytes()


def test_matrix_round_trip(tmp_path, rng):
    M = rng.standard_normal((7, 3))
    M[0, 0], M[1, 1], M[2, 2] = -0.0, 5e-324, 1.7976931348623157e308
    save_matrix(M, tmp_path / "m.kamx")
    assert load_matrix(tmp_path / "m.kamx").tobytes() == M.tobytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_matrix_rejects_empty(tmp_path):
    with pytest.raises(DimensionError):
        save_matrix(np.zeros((0, 0)), tmp_path / "e.kamx")
    assert not (tmp_path / "e.kamx").exists()


@pytest.mark.parametrize("mutate,err", [
    (lambda b: b"XXXX" + b[4:], FormatError),
    (lambda b: b[:4] + struct.pack("<H", 9) + b[6:], VersionError),
    (lambda b: b[:-1], CorruptFileError),
    (lambda b: b + b"\0", CorruptFileError),
    (lambda b: b[:10], CorruptFileError),
    (lambda b: b"", CorruptFileError),
    (lambda b: b[:6] + struct.pack("<QQ", 0, 3) + b[22:], CorruptFileError),
])
def test_matrix_negative(tmp_path, mutate, err):
    p = tmp_path / "bad.kamx"
    p.write_bytes(mutate(matrix_bytes(GOLDEN_MATRIX)))
    with pytest.raises(err):
        load_matrix(p)


def test_missing_matrix_file(tmp_path):
    with pytest.raises(CorruptFileError):
        load_matrix(tmp_path / "nope.kamx")


# -- checkpoints -------------------------------------------------------------

def _all_adapters(rng):
    W = rng.standard_normal((6, 6))
    shape = KronShape(3, 2, 2, 3)
    return {
        "soka": soka_init(W, shape, RankPolicy(tau=0.9)),
        "soka_manual": soka_init(W, shape, rank=4),
        "kron_random": kron_random_init(W, shape, 2, seed=3),
        "lora": lora_init(W, 2, seed=3),
        "pissa": pissa_init(W, 3),
        "full": full_init(W),
    }


@pytest.mark.parametrize("trained", [False, True])
def test_checkpoint_round_trip_bit_exact(tmp_path, rng, trained):
    X = rng.standard_normal((6, 4))
    for name, a in _all_adapters(rng).items():
        if trained:
            perturbed(a, rng)
        save_adapter(a, tmp_path / name, state="trained" if trained else "init")
        b = load_adapter(tmp_path / name)
        assert type(b) is type(a)
        assert b.forward(X).tobytes() == a.forward(X).tobytes(), name
        for k, v in a.parameters().items():
            assert b.parameters()[k].tobytes() == v.tobytes()
        assert b.base.tobytes() == a.base.tobytes()


def test_soka_round_trip_keeps_rank_decision(tmp_path, rng):
    for name, a in _all_adapters(rng).items():
        if not name.startswith("soka"):
            continue
        save_adapter(a, tmp_path / name)
        d = load_adapter(tmp_path / name).rank_decision
        assert (d.r_energy, d.r_elbow, d.r_final, d.clamped, d.mode) == (
            a.rank_decision.r_energy, a.rank_decision.r_elbow, a.rank_decision.r_final,
            a.rank_decision.clamped, a.rank_decision.mode)
        assert np.array_equal(load_spectrum(tmp_path / name), a.rank_decision.spectrum)


def test_lora_at_init_keeps_zero_b(tmp_path, rng):
    save_adapter(lora_init(rng.standard_normal((5, 4)), 2), tmp_path / "l")
    b = load_adapter(tmp_path / "l")
    assert np.all(b.B == 0) and not np.signbit(b.B).any()


def test_save_is_content_reproducible(tmp_path, rng):
    a = _all_adapters(rng)["soka"]
    save_adapter(a, tmp_path / "one", seeds={"seed": 1})
    save_adapter(a, tmp_path / "two", seeds={"seed": 1})
    assert _tree_bytes(tmp_path / "one") == _tree_bytes(tmp_path / "two")
    text = (tmp_path / "one" / "manifest.json").read_text()
    assert str(tmp_path) not in text


def test_manifest_contents(tmp_path, rng):
    save_adapter(_all_adapters(rng)["soka"], tmp_path / "c", seeds={"seed": 7})
    m = read_manifest(tmp_path / "c")
    assert m["kind"] == "soka" and m["shape"] == [3, 2, 2, 3] and m["tau"] == 0.9
    assert m["seeds"] == {"seed": 7} and m["format_version"] == 1
    assert m["rank"] == m["rank_decision"]["r_final"]
    assert set(m["files"]) >= {"base", "sigma", "U_0", "V_0", "spectrum"}


def _copy_golden(tmp_path, name):
    dst = tmp_path / name
    shutil.copytree(GOLDEN / name, dst)
    return dst


def _edit_manifest(path, fn):
    m = json.loads((path / "manifest.json").read_text())
    fn(m)
    (path / "manifest.json").write_text(json.dumps(m))


def test_manifest_wrong_rows_is_consistency_error(tmp_path):
    p = _copy_golden(tmp_path, "soka_ckpt")
    _edit_manifest(p, lambda m: m.update(rows=7))
    with pytest.raises(ConsistencyError):
        load_adapter(p)


def test_manifest_payload_shape_disagreement(tmp_path):
    p = _copy_golden(tmp_path, "lora_ckpt")
    _edit_manifest(p, lambda m: m["files"]["A"].update(rows=5))
    with pytest.raises(ConsistencyError):
        load_adapter(p)


def test_missing_payload_is_corrupt(tmp_path):
    p = _copy_golden(tmp_path, "soka_ckpt")
    (p / "V_1.kamx").unlink()
    with pytest.raises(CorruptFileError):
        load_adapter(p)
    assert verify_checksums(p) == ["V_1"]


def test_missing_manifest_and_bad_version(tmp_path):
    p = _copy_golden(tmp_path, "lora_ckpt")
    _edit_manifest(p, lambda m: m.update(format_version=2))
    with pytest.raises(VersionError):
        load_adapter(p)
    (p / "manifest.json").unlink()
    with pytest.raises(CorruptFileError):
        load_adapter(p)


def test_checksum_detects_flipped_byte(tmp_path):
    p = _copy_golden(tmp_path, "soka_ckpt")
    assert verify_checksums(p) == []
    data = bytearray((p / "U_0.kamx").read_bytes())
    data[-1] ^= 0x01
    (p / "U_0.kamx").write_bytes(bytes(data))
    assert verify_checksums(p) == ["U_0"]


# -- golden checkpoints --------------------------------------------------------

@pytest.mark.parametrize("name", ["soka_ckpt", "lora_ckpt"])
def test_golden_checkpoint_resaves_identically(tmp_path, name):
    a = load_adapter(GOLDEN / name)
    m = read_manifest(GOLDEN / name)
    save_adapter(a, tmp_path / name, state=m["state"], seeds=m["seeds"])
    assert _tree_bytes(tmp_path / name) == _tree_bytes(GOLDEN / name)


def test_golden_soka_reproduces_weight():
    a = load_adapter(GOLDEN / "soka_ckpt")
    W = _golden_weight()
    assert a.rank == 3 and a.rank_decision.r_final == 3
    assert np.linalg.norm(a.merge() - W) <= 1e-12 * np.linalg.norm(W)
    fresh = soka_init(W, KronShape(3, 2, 2, 3), RankPolicy(tau=0.9))
    np.testing.assert_allclose(a.sigma, fresh.sigma, rtol=1e-12)


def test_golden_lora():
    a = load_adapter(GOLDEN / "lora_ckpt")
    assert a.kind == "lora" and a.rank == 2 and np.all(a.B == 0)
    np.testing.assert_array_equal(a.base, _golden_weight())


# -- reports -----------------------------------------------------------------

def test_golden_rank_report(tmp_path):
    write_rank_decision(select_rank([10, 9, 1, 0.9], RankPolicy(tau=0.95)), tmp_path / "rd")
    for ext in (".csv", ".json"):
        assert (tmp_path / f"rd{ext}").read_bytes() == (GOLDEN / f"rank_decision{ext}").read_bytes()


def test_rank_report_csv_and_json_agree(tmp_path):
    d = select_rank([3.0, 1 / 3, 0.1, 0.0], RankPolicy(tau=0.9, r_max=3))
    csv_path, json_path = write_rank_decision(d, tmp_path / "rd")
    header, rows = read_csv(csv_path)
    doc = json.loads(json_path.read_text())
    col = {h: i for i, h in enumerate(header)}
    assert [float(r[col["sigma"]]) for r in rows] == doc["spectrum"] == list(d.spectrum)
    assert [float(r[col["energy"]]) for r in rows] == doc["energy_curve"]
    assert {r[col["r_final"]] for r in rows} == {str(doc["r_final"])}
    assert rows[-1][col["gap"]] == ""


def test_train_and_comparison_reports(tmp_path):
    t = make_task((16, 16), 1, seed=0)
    logs = [train(t, m, config=TrainConfig(steps=5)) for m in ("soka", "lora")]
    csv_path, json_path = write_train_log(logs[0], tmp_path / "soka")
    header, rows = read_csv(csv_path)
    doc = json.loads(json_path.read_text())
    assert header == ["step", "loss", "grad_norm"] and len(rows) == 5
    assert [float(r[1]) for r in rows] == doc["loss"] == logs[0].loss
    assert [float(r[2]) for r in rows] == doc["grad_norm"] == logs[0].grad_norm

    rep = compare_runs(logs)
    csv_path, json_path = write_comparison(rep, tmp_path / "cmp")
    header, rows = read_csv(csv_path)
    doc = json.loads(json_path.read_text())
    assert header == COMPARISON_HEADER
    for r, m in zip(rows, doc["methods"]):
        assert float(r[header.index("auc")]) == m["auc"]

    header, rows = read_csv(write_curves(logs, tmp_path / "curves.csv"))
    assert header == ["step", "loss_soka", "grad_norm_soka", "loss_lora", "grad_norm_lora"]
    assert float(rows[3][3]) == logs[1].loss[3]


def test_cost_report_files(tmp_path, rng):
    a = _all_adapters(rng)
    csv_path, json_path = write_cost_reports(
        {"soka": a["soka"].cost_report(), "lora": a["lora"].cost_report()}, tmp_path / "c",
        extra={"rank": 2})
    header, rows = read_csv(csv_path)
    doc = json.loads(json_path.read_text())
    assert header[0] == "method" and [r[0] for r in rows] == ["soka", "lora"]
    assert int(rows[1][1]) == doc["methods"]["lora"]["trainable_params"] == 24
    assert doc["rank"] == 2


@pytest.mark.parametrize("payload", ["base", "U_0", "sigma"])
def test_nonfinite_payload_is_corrupt(tmp_path, payload):
    p = _copy_golden(tmp_path, "soka_ckpt")
    f = p / f"{payload}.kamx"
    data = bytearray(f.read_bytes())
    data[22:30] = struct.pack("<d", float("nan"))
    f.write_bytes(bytes(data))
    with pytest.raises(CorruptFileError, match="NaN"):
        load_adapter(p)
