import json

import numpy as np
import pytest
import scipy.sparse as sp

import modlink as ml
from modlink.cache import FrfCache, digest_file, system_digest
from modlink.cli import main, parse_assignments, parse_freq
from modlink.errors import ValidationError
from modlink.manifest import (
    ManifestError,
    bench_to_manifest_files,
    build_model,
    load_manifest,
    read_matrix_file,
    save_manifest,
    write_matrix_file,
)


@pytest.fixture(scope="module")
def bench_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    bench = ml.make_two_stage_bench(ml.StageModelConfig(n_v=5))
    return bench_to_manifest_files(bench, out), bench


def minimal_manifest(tmp_path, n_dof=3):
    sys = ml.make_chain(n_dof, m=1.0, k=100.0, d=1.0, ports=(0, n_dof - 1))
    write_matrix_file(tmp_path / "m.mtx", sys.M, symmetry="symmetric")
    write_matrix_file(tmp_path / "k.mtx", sys.K, symmetry="symmetric")
    write_matrix_file(tmp_path / "d.mtx", sys.D, symmetry="symmetric")
    spec = {
        "schema": 1,
        "name": "minimal",
        "subsystems": [{
            "name": "s",
            "matrices": {"M": "m.mtx", "K": "k.mtx", "D": "d.mtx"},
            "ports": [
                {"name": "in", "dof": 0, "coord": 0.0},
                {"name": "out", "dof": n_dof - 1, "coord": 1.0},
            ],
        }],
        "interfaces": [],
        "external": {"inputs": ["s.in"], "outputs": ["s.out"]},
        "frequency_grid": {"min": 1.0, "max": 100.0, "count": 20,
                           "spacing": "log"},
    }
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(spec))
    return path, sys


class TestMatrixMarket:
    def test_round_trip_exact(self, tmp_path, rng):
        mat = sp.random(8, 8, density=0.4, random_state=42)
        mat = mat + mat.T  # symmetric
        write_matrix_file(tmp_path / "a.mtx", mat, symmetry="symmetric")
        back = read_matrix_file(tmp_path / "a.mtx")
        assert (abs(back - sp.csr_matrix(mat)) > 0).nnz == 0

    def test_header_symmetric(self, tmp_path):
        write_matrix_file(tmp_path / "a.mtx", np.eye(2), symmetry="symmetric")
        header = (tmp_path / "a.mtx").read_text().splitlines()[0]
        assert header.startswith("%%MatrixMarket matrix coordinate real symmetric")


class TestLoadManifest:
    def test_minimal_manifest_loads_and_assembles(self, tmp_path):
        path, sys = minimal_manifest(tmp_path)
        model = build_model(load_manifest(path))
        assert model.names == ("s",)
        gb = ml.block_frf(model.block, model.omega)
        gc = ml.lft_assemble(gb, model.k_outer)
        direct = ml.frf_eval(model.descriptors[0], model.omega)
        np.testing.assert_array_equal(gc.data[:, 0, 0], direct.data[:, 1, 0])

    def test_missing_matrix_file_named(self, tmp_path):
        path, _ = minimal_manifest(tmp_path)
        spec = json.loads(path.read_text())
        spec["subsystems"][0]["matrices"]["K"] = "gone.mtx"
        path.write_text(json.dumps(spec))
        with pytest.raises(ManifestError, match="gone.mtx"):
            load_manifest(path)

    def test_all_errors_collected(self, tmp_path):
        path, _ = minimal_manifest(tmp_path)
        spec = json.loads(path.read_text())
        spec["subsystems"][0]["matrices"]["K"] = "gone.mtx"
        spec["external"]["inputs"] = ["s.nope"]
        del spec["frequency_grid"]
        path.write_text(json.dumps(spec))
        with pytest.raises(ManifestError) as err:
            load_manifest(path)
        assert len(err.value.errors) == 3

    def test_dangling_interface_port_reported(self, tmp_path):
        path, _ = minimal_manifest(tmp_path)
        spec = json.loads(path.read_text())
        spec["interfaces"] = [{
            "id": "i0",
            "side_j": {"subsystem": "s", "grid": ["in", "missing"]},
            "side_ell": {"subsystem": "s", "grid": ["out"]},
            "springs": [{"stiffness": 1.0, "anchor_j": 0.0,
                         "anchor_ell_base": 0.0}],
        }]
        spec["operating_points"] = {"ranges": {"i0": [0.0, 0.1]},
                                    "counts": {"i0": 2}}
        path.write_text(json.dumps(spec))
        with pytest.raises(ManifestError, match="s.missing"):
            load_manifest(path)

    def test_bench_round_trip_semantic_equality(self, bench_dir, tmp_path):
        manifest_path, _ = bench_dir
        manifest = load_manifest(manifest_path)
        save_manifest(manifest, tmp_path / "again.json")
        # matrices live next to the original manifest; compare specs and the
        # rebuilt models
        again = json.loads((tmp_path / "again.json").read_text())
        assert again == manifest.spec

    def test_bench_manifest_reproduces_generated_model(self, bench_dir):
        manifest_path, bench = bench_dir
        model = build_model(load_manifest(manifest_path))
        for name in bench.names:
            built = model.systems[model.names.index(name)]
            src = bench.system(name)
            assert np.allclose(built.M.toarray(), src.M.toarray())
            assert np.allclose(built.K.toarray(), src.K.toarray())
            assert np.allclose(built.D.toarray(), src.D.toarray(),
                               atol=1e-12 * abs(src.D).max())


class TestFrfCache:
    def test_hit_returns_identical_payload(self, tmp_path, rng):
        sys, _ = __import__("oracles").random_chain_system(rng, 4)
        desc = ml.to_descriptor(sys)
        omega = np.geomspace(1.0, 50.0, 10)
        cache = FrfCache(tmp_path / "cache")
        digest = system_digest(sys)
        first = cache.get_or_compute(digest, omega,
                                     lambda: ml.frf_eval(desc, omega))
        second = cache.get_or_compute(digest, omega,
                                      lambda: ml.frf_eval(desc, omega))
        assert cache.stats == {"hits": 1, "misses": 1, "evaluations": 1}
        np.testing.assert_array_equal(first.data, second.data)
        np.testing.assert_array_equal(first.frequencies, second.frequencies)

    def test_grid_change_forces_recompute(self, tmp_path, rng):
        sys, _ = __import__("oracles").random_chain_system(rng, 4)
        desc = ml.to_descriptor(sys)
        cache = FrfCache(tmp_path / "cache")
        digest = system_digest(sys)
        omega1 = np.geomspace(1.0, 50.0, 10)
        omega2 = np.geomspace(1.0, 50.0, 11)
        cache.get_or_compute(digest, omega1, lambda: ml.frf_eval(desc, omega1))
        cache.get_or_compute(digest, omega2, lambda: ml.frf_eval(desc, omega2))
        assert cache.stats["evaluations"] == 2

    def test_file_bit_flip_changes_digest(self, tmp_path):
        path, _ = minimal_manifest(tmp_path)
        mfile = tmp_path / "k.mtx"
        before = digest_file(mfile)
        raw = bytearray(mfile.read_bytes())
        # flip one bit inside a numeric value (last data line)
        raw[-3] ^= 0x01
        mfile.write_bytes(bytes(raw))
        assert digest_file(mfile) != before


class TestCliParsers:
    def test_parse_freq(self):
        spec = parse_freq("1:100:20:log")
        assert spec == {"min": 1.0, "max": 100.0, "count": 20, "spacing": "log"}

    def test_parse_freq_rejects_garbage(self):
        with pytest.raises(ValidationError):
            parse_freq("1:2")

    def test_parse_assignments(self):
        assert parse_assignments("a=bt,b=cb") == {"a": "bt", "b": "cb"}
        assert parse_assignments("bt") == {"*": "bt"}


class TestCliCommands:
    def test_gen_assemble_round_trip(self, tmp_path):
        gen_dir = tmp_path / "gen"
        assert main(["gen", "two-stage", "--out", str(gen_dir)]) == 0
        out = tmp_path / "asm"
        rc = main([
            "assemble", "--manifest", str(gen_dir / "manifest.json"),
            "--out", str(out), "--op", "rail0=0.0",
            "--freq", "20:2000:10:log",
        ])
        assert rc == 0
        assert (out / "frf.csv").exists()
        assert (out / "k11.mtx").exists()
        index = json.loads((out / "index.json").read_text())
        assert index["operating_points"] == [{"rail0": 0.0}]

    def test_sweep_cache_economics(self, tmp_path):
        gen_dir = tmp_path / "gen"
        main(["gen", "two-stage", "--out", str(gen_dir)])
        ops = tmp_path / "ops.json"
        ops.write_text(json.dumps(
            {"ranges": {"rail0": [-0.1, 0.1]}, "counts": {"rail0": 50}}
        ))
        cache_dir = tmp_path / "cache"
        args = ["sweep", "--manifest", str(gen_dir / "manifest.json"),
                "--ops", str(ops), "--freq", "20:2000:30:log",
                "--cache-dir", str(cache_dir)]
        assert main(args + ["--out", str(tmp_path / "s1")]) == 0
        cold = json.loads((tmp_path / "s1" / "index.json").read_text())["cache"]
        assert cold["evaluations"] == 2  # one per subsystem, 50 points served
        assert main(args + ["--out", str(tmp_path / "s2")]) == 0
        warm = json.loads((tmp_path / "s2" / "index.json").read_text())["cache"]
        assert warm["evaluations"] == 0
        a = (tmp_path / "s1" / "sweep.csv").read_text()
        b = (tmp_path / "s2" / "sweep.csv").read_text()
        assert a == b  # deterministic output, cold or warm

    def test_sweep_normalize_column(self, tmp_path):
        gen_dir = tmp_path / "gen"
        main(["gen", "two-stage", "--out", str(gen_dir)])
        out = tmp_path / "norm"
        main(["sweep", "--manifest", str(gen_dir / "manifest.json"),
              "--out", str(out), "--op", "rail0=0.0",
              "--freq", "20:200:5:log", "--normalize", "100.0"])
        header, first = (out / "sweep.csv").read_text().splitlines()[:2]
        assert header.split(",")[1] == "omega_norm"
        cols = first.split(",")
        assert float(cols[1]) == pytest.approx(float(cols[0]) / 100.0)

    def test_reduce_emits_basis_and_matrices(self, tmp_path):
        gen_dir = tmp_path / "gen"
        main(["gen", "two-stage", "--out", str(gen_dir),
              "--port-set", "interface"])
        out = tmp_path / "red"
        rc = main(["reduce", "--manifest", str(gen_dir / "manifest.json"),
                   "--out", str(out),
                   "--method", "carriage=bt,rail=cb",
                   "--order", "carriage=12,rail=4"])
        assert rc == 0
        assert (out / "carriage_Ar.mtx").exists()
        assert (out / "rail_Kr.mtx").exists()
        meta = json.loads((out / "rail_basis.json").read_text())
        assert meta["method"] == "cb"
        assert meta["r"] == 2 * (5 + 4)
        v = read_matrix_file(out / "rail_V.mtx")
        assert v.shape == (25, 9)

    def test_compare_full_vs_full_is_zero_error(self, tmp_path):
        gen_dir = tmp_path / "gen"
        main(["gen", "two-stage", "--out", str(gen_dir),
              "--port-set", "interface"])
        out = tmp_path / "cmp"
        rc = main(["compare", "--manifest", str(gen_dir / "manifest.json"),
                   "--out", str(out), "--op", "rail0=0.0",
                   "--freq", "20:2000:15:log",
                   "--method", "carriage=cb,rail=cb",
                   "--order", "carriage=18,rail=20"])
        assert rc == 0
        payload = json.loads((out / "error_report.json").read_text())
        assert payload["passed"] is True
        assert payload["max_rel_error"] <= 1e-8

    def test_search_cli_smoke(self, tmp_path):
        gen_dir = tmp_path / "gen"
        main(["gen", "two-stage", "--out", str(gen_dir),
              "--port-set", "interface"])
        ops = tmp_path / "ops.json"
        ops.write_text(json.dumps(
            {"ranges": {"rail0": [-0.02, 0.02]}, "counts": {"rail0": 2}}
        ))
        out = tmp_path / "search"
        rc = main(["search", "--manifest", str(gen_dir / "manifest.json"),
                   "--out", str(out), "--ops", str(ops),
                   "--freq", "20:5000:40:log", "--method", "cb",
                   "--threshold", "0.1"])
        assert rc == 0
        payload = json.loads((out / "search.json").read_text())
        assert payload["reduction_pct_formula"] == "100 * (1 - r / n)"
        assert (out / "orders_per_op.csv").exists()
        assert (out / "orders_final.csv").exists()

    def test_validation_error_exit_code(self, tmp_path):
        missing = tmp_path / "nope.json"
        rc = main(["sweep", "--manifest", str(missing),
                   "--out", str(tmp_path / "x")])
        assert rc == 1

    def test_numerical_error_exit_code(self, tmp_path):
        # undamped chain with a resonance exactly on the requested grid
        sys = ml.make_chain(1, m=1.0, k=100.0, d=0.0, ports=(0,))
        write_matrix_file(tmp_path / "m.mtx", sys.M, symmetry="symmetric")
        write_matrix_file(tmp_path / "k.mtx", sys.K, symmetry="symmetric")
        spec = {
            "schema": 1,
            "subsystems": [{
                "name": "s",
                "matrices": {"M": "m.mtx", "K": "k.mtx"},
                "ports": [{"name": "p", "dof": 0, "coord": 0.0}],
            }],
            "interfaces": [],
            "external": {"inputs": ["s.p"], "outputs": ["s.p"]},
            "frequency_grid": {"min": 5.0, "max": 20.0, "count": 4,
                               "spacing": "linear"},
        }
        (tmp_path / "manifest.json").write_text(json.dumps(spec))
        rc = main(["assemble", "--manifest", str(tmp_path / "manifest.json"),
                   "--out", str(tmp_path / "out")])
        assert rc == 2
