import numpy as np
import pytest
import scipy.linalg

import modlink as ml
from modlink import mor
from modlink.errors import (
    NumericalError,
    PortMismatchError,
    ValidationError,
)
from modlink.interconnect import external_io
from oracles import max_rel_err, random_chain_system, random_stable_ss


def hinf_sampled(ss_a, ss_b, omega):
    ga = ml.frf_eval(ss_a, omega).data
    gb = ml.frf_eval(ss_b, omega).data
    return max(
        np.linalg.norm(ga[k] - gb[k], ord=2) for k in range(omega.size)
    )


def gramians_oracle(A, B, C):
    """Controllability/observability gramians through the Lyapunov equations."""
    P = scipy.linalg.solve_continuous_lyapunov(A, -B @ B.T)
    Q = scipy.linalg.solve_continuous_lyapunov(A.T, -C.T @ C)
    return P, Q


class TestReduceBT:
    def test_full_order_is_exact(self, rng):
        ss = random_stable_ss(rng, 7, m=2, p=2)
        red, basis = mor.reduce_bt(ss, 7)
        omega = np.geomspace(0.01, 100.0, 40)
        g0 = ml.frf_eval(ss, omega).data
        g1 = ml.frf_eval(red, omega).data
        assert max_rel_err(g1, g0, floor_rel=1e-9) <= 1e-12

    def test_two_state_example_keeps_slow_pole(self):
        eps = 1e-6
        A = np.diag([-1.0, -100.0])
        B = np.array([[1.0], [np.sqrt(eps)]])
        C = np.array([[1.0, np.sqrt(eps)]])
        ss = ml.DescriptorStateSpace(E=np.eye(2), A=A, B=B, C=C)
        # Lyapunov-equation oracle; b_i c_i / (2 |a_i|) holds up to the
        # cross-gramian coupling of the two poles
        P, Q = gramians_oracle(A, B, C)
        sigma = np.sqrt(np.sort(np.linalg.eigvals(P @ Q).real)[::-1])
        assert sigma[0] == pytest.approx(0.5, rel=1e-6)
        assert sigma[1] == pytest.approx(eps / 200.0, rel=0.05)
        red, basis = mor.reduce_bt(ss, 1)
        np.testing.assert_allclose(basis.metadata["hsv"], sigma, rtol=1e-8)
        pole = np.linalg.eigvals(red.A_dense)[0]
        assert pole == pytest.approx(-1.0, abs=1e-3)
        omega = np.geomspace(1e-3, 1e4, 400)
        assert hinf_sampled(ss, red, omega) <= 2.0 * sigma[1] + 1e-12

    def test_prescribed_sigmas_bound_error(self):
        # symmetric realization built to be balanced with gramians
        # P = Q = diag(1, 1e-8): A_ij = -b_i b_j / (s_i + s_j)
        sig = np.array([1.0, 1e-8])
        b = np.array([1.0, 1.0])
        A = -np.outer(b, b) / (sig[:, None] + sig[None, :])
        B = b[:, None]
        C = b[None, :]
        ss = ml.DescriptorStateSpace(E=np.eye(2), A=A, B=B, C=C)
        P, Q = gramians_oracle(A, B, C)
        np.testing.assert_allclose(np.diag(P), sig, rtol=1e-6)
        np.testing.assert_allclose(np.diag(Q), sig, rtol=1e-6)
        # pole spread ~1e8 exceeds the default rigid classification band
        red, basis = mor.reduce_bt(ss, 1, rigid_tol=1e-12)
        np.testing.assert_allclose(basis.metadata["hsv"], sig, rtol=1e-6)
        omega = np.geomspace(1e-4, 1e4, 400)
        assert hinf_sampled(ss, red, omega) <= 2.0 * sig[1] + 1e-8

    def test_additive_bound_on_random_systems(self, rng):
        omega = np.geomspace(1e-3, 1e3, 300)
        for _ in range(10):
            n = int(rng.integers(4, 30))
            ss = random_stable_ss(rng, n, m=2, p=2)
            r = int(rng.integers(1, n))
            red, basis = mor.reduce_bt(ss, r)
            tail = 2.0 * basis.metadata["hsv"][max(r - basis.metadata["n_rigid"], 0):].sum()
            assert hinf_sampled(ss, red, omega) <= tail + 1e-8

    def test_rigid_modes_deflated_and_kept(self, rng):
        sys, _ = random_chain_system(rng, 5, grounded=False)
        D = ml.build_modal_damping(sys.M, sys.K, 0.04)
        sys = ml.SecondOrderSystem(
            M=sys.M, D=D, K=sys.K, input_map=sys.input_map,
            output_map=sys.output_map,
        )
        ss = ml.to_descriptor(sys)
        red, basis = mor.reduce_bt(ss, 6)
        assert basis.metadata["n_rigid"] == 2
        omega = np.geomspace(0.5, 200.0, 200)
        err = hinf_sampled(ss, red, omega)
        assert err <= basis.metadata["bound_tail"] + 1e-8
        # the reattached rigid block keeps the 1/w^2 low-frequency divergence
        omega_low = np.array([1e-3, 1e-2])
        g1 = np.abs(ml.frf_eval(red, omega_low).data[:, 0, 0])
        assert g1[0] / g1[1] == pytest.approx(100.0, rel=0.05)

    def test_undamped_marginal_modes_rejected(self):
        sys = ml.make_chain(3, m=1.0, k=100.0, d=0.0)
        with pytest.raises(NumericalError, match="stable"):
            mor.reduce_bt(ml.to_descriptor(sys), 2)

    def test_order_below_rigid_count_rejected(self, rng):
        sys, _ = random_chain_system(rng, 4, grounded=False)
        D = ml.build_modal_damping(sys.M, sys.K, 0.05)
        sys = ml.SecondOrderSystem(
            M=sys.M, D=D, K=sys.K, input_map=sys.input_map,
            output_map=sys.output_map,
        )
        with pytest.raises(ValidationError, match="rigid"):
            mor.reduce_bt(ml.to_descriptor(sys), 1)

    def test_hsv_nonincreasing(self, rng):
        ss = random_stable_ss(rng, 12, m=2, p=3)
        _, basis = mor.reduce_bt(ss, 5)
        hsv = basis.metadata["hsv"]
        assert np.all(np.diff(hsv) <= 1e-12 * hsv[0])


class TestReduceCB:
    def make_chain_modal(self, n=10, zeta=0.05, ends_heavy=True):
        m = np.ones(n)
        if ends_heavy:
            m[0] = m[-1] = 10.0
        base = ml.make_chain(n, m=m, k=1000.0, d=0.0, ports=(0, n - 1))
        D = ml.build_modal_damping(base.M, base.K, zeta)
        return ml.SecondOrderSystem(
            M=base.M, D=D, K=base.K, input_map=base.input_map,
            output_map=base.output_map, input_labels=base.input_labels,
            output_labels=base.output_labels,
        )

    def test_complete_basis_is_exact(self):
        sys = self.make_chain_modal()
        red, _ = mor.reduce_cb(sys, (0, 9), 8)
        omega = np.geomspace(0.5, 100.0, 200)
        g0 = ml.frf_eval(ml.to_descriptor(sys), omega).data
        g1 = ml.frf_eval(ml.to_descriptor(red), omega).data
        assert max_rel_err(g1, g0, floor_rel=1e-6) <= 1e-10

    def test_static_boundary_compliance_exact_any_mode_count(self):
        sys = self.make_chain_modal()
        К_full = np.linalg.inv(sys.K.toarray())[np.ix_([0, 9], [0, 9])]
        for n_modes in (0, 2, 5):
            red, _ = mor.reduce_cb(sys, (0, 9), n_modes)
            comp = np.linalg.inv(red.K.toarray())[np.ix_([0, 1], [0, 1])]
            assert np.abs(comp - К_full).max() <= 1e-12 * np.abs(К_full).max()

    def test_order_bookkeeping(self):
        sys = self.make_chain_modal()
        red, basis = mor.reduce_cb(sys, (0, 9), 3)
        assert red.n_dof == 5
        assert basis.r == 10
        assert basis.metadata["n_modes"] == 3

    def test_error_small_below_half_fourth_fixed_interface_mode(self):
        sys = self.make_chain_modal()
        red, basis = mor.reduce_cb(sys, (0, 9), 3)
        interior = list(range(1, 9))
        lam = scipy.linalg.eigvalsh(
            sys.K.toarray()[np.ix_(interior, interior)],
            sys.M.toarray()[np.ix_(interior, interior)],
        )
        w4 = np.sqrt(lam[3])
        omega = np.geomspace(0.5, w4 / 2.0, 200)
        g0 = ml.frf_eval(ml.to_descriptor(sys), omega).data
        g1 = ml.frf_eval(ml.to_descriptor(red), omega).data
        assert max_rel_err(g1, g0, floor_rel=1e-6) < 0.01

    def test_constraint_modes_identity_on_boundary(self):
        sys = self.make_chain_modal()
        _, basis = mor.reduce_cb(sys, (0, 9), 2)
        np.testing.assert_allclose(basis.V[[0, 9], :2], np.eye(2))

    def test_port_outside_boundary_rejected(self):
        sys = self.make_chain_modal()
        with pytest.raises(PortMismatchError):
            mor.reduce_cb(sys, (0, 5), 2)

    def test_unconstrained_interior_rejected(self):
        # free-free: clamping only dof 0 leaves interior regular, but an
        # empty-stiffness interior must fail
        sys = ml.make_chain(3, m=1.0, k=0.0, bc="free-free", ports=(0,))
        with pytest.raises(NumericalError, match="boundary"):
            mor.reduce_cb(sys, (0,), 0)

    def test_reciprocity_preserved(self):
        sys = self.make_chain_modal()
        red, _ = mor.reduce_cb(sys, (0, 9), 3)
        omega = np.geomspace(1.0, 50.0, 30)
        g = ml.frf_eval(ml.to_descriptor(red), omega).data
        assert np.abs(g - np.transpose(g, (0, 2, 1))).max() <= 1e-10 * np.abs(g).max()


class TestReduceHH:
    def test_complete_elastic_basis_is_exact(self):
        sys = TestReduceCB().make_chain_modal(ends_heavy=False)
        red, basis = mor.reduce_hh(sys, (0, 9), 8)
        omega = np.geomspace(0.5, 100.0, 200)
        g0 = ml.frf_eval(ml.to_descriptor(sys), omega).data
        g1 = ml.frf_eval(ml.to_descriptor(red), omega).data
        assert max_rel_err(g1, g0, floor_rel=1e-6) <= 1e-8

    def test_free_free_rigid_mode_preserved(self):
        sys = ml.make_chain(2, m=1.0, k=5.0, bc="free-free", ports=(0,))
        red, basis = mor.reduce_hh(sys, (0,), 0)
        k_red = red.K.toarray()
        lam = np.linalg.eigvalsh(k_red)
        assert np.sum(np.abs(lam) < 1e-10 * max(abs(lam).max(), 1.0)) == 1
        assert red.n_dof == 1
        # static translation reproduced exactly by the constraint mode
        np.testing.assert_allclose(basis.V[:, 0], [1.0, 1.0])

    def test_static_boundary_compliance_exact(self):
        sys = TestReduceCB().make_chain_modal()
        K_full = np.linalg.inv(sys.K.toarray())[np.ix_([0, 9], [0, 9])]
        red, _ = mor.reduce_hh(sys, (0, 9), 4)
        comp = np.linalg.inv(red.K.toarray())[np.ix_([0, 1], [0, 1])]
        assert np.abs(comp - K_full).max() <= 1e-12 * np.abs(K_full).max()

    def test_comparable_to_cb_at_equal_order(self):
        sys = TestReduceCB().make_chain_modal(ends_heavy=False, zeta=0.02)
        red_cb, b_cb = mor.reduce_cb(sys, (0, 9), 3)
        red_hh, b_hh = mor.reduce_hh(sys, (0, 9), 3)
        assert b_cb.r == b_hh.r
        interior = list(range(1, 9))
        lam = scipy.linalg.eigvalsh(
            sys.K.toarray()[np.ix_(interior, interior)],
            sys.M.toarray()[np.ix_(interior, interior)],
        )
        omega = np.geomspace(0.5, np.sqrt(lam[3]) / 2.0, 200)
        g0 = ml.frf_eval(ml.to_descriptor(sys), omega).data
        e_cb = max_rel_err(
            ml.frf_eval(ml.to_descriptor(red_cb), omega).data, g0, 1e-6
        )
        e_hh = max_rel_err(
            ml.frf_eval(ml.to_descriptor(red_hh), omega).data, g0, 1e-6
        )
        assert e_hh <= 10.0 * e_cb
        assert e_cb <= 10.0 * e_hh

    def test_rank_deficiency_reported(self):
        # rigid mode duplicates constraint-mode content: requested 1 rigid +
        # 1 elastic collapses to rank 1 extra column at most
        sys = ml.make_chain(4, m=1.0, k=50.0, bc="free-free", ports=(0, 3))
        red, basis = mor.reduce_hh(sys, (0, 3), 1)
        assert basis.metadata["achieved_rank"] <= 1 + basis.metadata["n_rigid"]
        assert basis.r == 2 * (2 + basis.metadata["achieved_rank"])


class TestAssembleReduced:
    def setup_pair(self, rng):
        s1, _ = random_chain_system(rng, 6, n_ports=2, name="s1")
        s2, _ = random_chain_system(rng, 6, n_ports=2, name="s2")
        block = ml.block_collect([ml.to_descriptor(s1), ml.to_descriptor(s2)])
        iface = ml.InterfaceSpec(
            id="i0",
            side_j=ml.InterfaceSide("s1", (ml.VirtualPoint(0.0, 1, 1),)),
            side_ell=ml.InterfaceSide("s2", (ml.VirtualPoint(0.0, 0, 0),)),
            springs=(ml.SpringSpec(120.0, 0.0, 0.0),),
        )
        k_outer = external_io(block, [("s1", 0)], [("s2", 1)])
        omega = np.geomspace(0.5, 120.0, 50)
        return (s1, s2), block, iface, k_outer, omega

    def test_identity_reduction_bit_for_bit(self, rng):
        (s1, s2), block, iface, k_outer, omega = self.setup_pair(rng)
        op = ml.OperatingPoint({"i0": 0.0})
        k = k_outer.with_k11(ml.static_k11([iface], op, block))
        direct = ml.lft_assemble(ml.block_frf(block, omega), k)
        assembled = mor.assemble_reduced(
            [ml.to_descriptor(s1), ml.to_descriptor(s2)], k, omega,
            names=["s1", "s2"], reference_block=block,
        )
        np.testing.assert_array_equal(assembled.data, direct.data)

    def test_one_reduced_keeps_error_bounded(self, rng):
        (s1, s2), block, iface, k_outer, omega = self.setup_pair(rng)
        op = ml.OperatingPoint({"i0": 0.0})
        k = k_outer.with_k11(ml.static_k11([iface], op, block))
        full = ml.lft_assemble(ml.block_frf(block, omega), k)
        red, _ = mor.reduce_bt(ml.to_descriptor(s1), 8)
        mixed = mor.assemble_reduced(
            [red, ml.to_descriptor(s2)], k, omega, names=["s1", "s2"],
            reference_block=block,
        )
        report = mor.relative_error(full, mixed, threshold=0.5)
        assert report.passed

    def test_port_mismatch_rejected(self, rng):
        (s1, s2), block, iface, k_outer, omega = self.setup_pair(rng)
        d1 = ml.to_descriptor(s1)
        crippled = ml.DescriptorStateSpace(E=d1.E, A=d1.A, B=d1.B[:, :1],
                                           C=d1.C, name="s1")
        k = k_outer
        with pytest.raises(PortMismatchError, match="preserve ports"):
            mor.assemble_reduced([crippled, ml.to_descriptor(s2)], k, omega,
                                 names=["s1", "s2"], reference_block=block)

    def test_one_reduction_serves_multiple_points(self, rng):
        s1 = ml.make_chain(6, m=1.0, k=900.0, d=4.0, ports=(0, 1), name="s1")
        s2 = ml.make_chain(6, m=1.1, k=700.0, d=4.0, ports=(0, 1), name="s2")
        block = ml.block_collect([ml.to_descriptor(s1), ml.to_descriptor(s2)])
        iface = ml.InterfaceSpec(
            id="i0",
            side_j=ml.InterfaceSide("s1", (ml.VirtualPoint(0.0, 0, 0),
                                           ml.VirtualPoint(1.0, 1, 1))),
            side_ell=ml.InterfaceSide("s2", (ml.VirtualPoint(0.0, 0, 0),
                                             ml.VirtualPoint(1.0, 1, 1))),
            springs=(ml.SpringSpec(150.0, 0.4, 0.2),),
        )
        k_outer = external_io(block, [("s1", 0)], [("s2", 1)])
        omega = np.geomspace(0.5, 120.0, 40)
        red, _ = mor.reduce_bt(ml.to_descriptor(s1), 8)
        results = [
            mor.assemble_reduced(
                [red, ml.to_descriptor(s2)], k_outer, omega,
                interfaces=[iface], op=ml.OperatingPoint({"i0": delta}),
                names=["s1", "s2"], reference_block=block,
            )
            for delta in (0.0, 0.3)
        ]
        assert not np.array_equal(results[0].data, results[1].data)


class TestRelativeError:
    def make_sweeps(self, factor):
        omega = np.geomspace(1.0, 10.0, 5)
        data = np.ones((5, 1, 1), dtype=complex)
        full = ml.FrfSweep(omega, data)
        reduced = ml.FrfSweep(omega, factor * data)
        return full, reduced

    def test_identical_sweeps_pass_with_zero(self):
        full, reduced = self.make_sweeps(1.0)
        report = mor.relative_error(full, reduced)
        assert report.passed
        assert report.max_rel_error == 0.0

    def test_five_percent_scaling_passes(self):
        full, reduced = self.make_sweeps(1.05)
        report = mor.relative_error(full, reduced)
        assert report.passed
        assert report.max_rel_error == pytest.approx(0.05)

    def test_twenty_percent_scaling_fails(self):
        full, reduced = self.make_sweeps(1.2)
        report = mor.relative_error(full, reduced)
        assert not report.passed
        assert report.max_rel_error == pytest.approx(0.2)

    def test_grid_mismatch_rejected(self):
        full, _ = self.make_sweeps(1.0)
        other = ml.FrfSweep(np.geomspace(2.0, 20.0, 5),
                            np.ones((5, 1, 1), dtype=complex))
        with pytest.raises(ValidationError, match="grid"):
            mor.relative_error(full, other)

    def test_floor_excludes_dips(self):
        omega = np.geomspace(1.0, 10.0, 4)
        g = np.ones((4, 1, 1), dtype=complex)
        g[2] = 1e-15  # antiresonance dip
        gh = g.copy()
        gh[2] = 2e-15  # 100% off at the dip only
        report = mor.relative_error(
            ml.FrfSweep(omega, g), ml.FrfSweep(omega, gh), floor_rel=1e-12
        )
        assert report.passed

    def test_csv_json_round_trip(self, tmp_path):
        full, reduced = self.make_sweeps(1.07)
        report = mor.relative_error(full, reduced)
        report.save_csv(tmp_path / "r.csv")
        report.save_json(tmp_path / "r.json")
        import json

        payload = json.loads((tmp_path / "r.json").read_text())
        assert payload["passed"] is True
        lines = (tmp_path / "r.csv").read_text().strip().splitlines()
        assert len(lines) == 2  # header + one entry


class TestMinimalOrderSearch:
    def setup_bench(self, bench_interface):
        bench = bench_interface
        block = ml.block_collect(
            [ml.to_descriptor(s) for s in bench.systems], bench.names
        )
        k_outer = external_io(block, bench.external_inputs,
                              bench.external_outputs)
        omega = np.geomspace(20.0, 5e3, 60)
        ops = ml.make_operating_grid({"rail0": (-0.02, 0.02)}, {"rail0": 3})
        return bench, k_outer, omega, ops

    def test_vacuous_threshold_gives_minimum_orders(self, bench_interface):
        bench, k_outer, omega, ops = self.setup_bench(bench_interface)
        result = mor.minimal_order_search(
            list(bench.systems), ["bt", "cb"], bench.interfaces, ops, omega,
            k_outer, threshold=np.inf, names=list(bench.names), refine=False,
        )
        # carriage BT floors at its rigid-state count, rail CB at 2*|boundary|
        assert result.combined_orders["carriage"] == 2
        assert result.combined_orders["rail"] == 2 * 5
        assert all(w is None for w in result.witnesses.values())

    def test_single_subsystem_search_matches_exhaustive_scan(self, rng):
        sys, _ = random_chain_system(rng, 6, n_ports=2, name="s")
        block = ml.block_collect([ml.to_descriptor(sys)])
        k_outer = external_io(block, [("s", 0)], [("s", 1)])
        omega = np.geomspace(1.0, 150.0, 80)
        threshold = 0.1
        result = mor.minimal_order_search(
            [sys], ["bt"], [], [ml.OperatingPoint({})], omega, k_outer,
            threshold=threshold, names=["s"], refine=False,
        )
        full = ml.lft_assemble(ml.block_frf(block, omega), k_outer)
        found = result.combined_orders["s"]
        for r in range(1, 13):
            red, _ = mor.reduce_bt(ml.to_descriptor(sys), r)
            cand = mor.assemble_reduced([red], k_outer, omega, names=["s"])
            ok = mor.relative_error(full, cand, threshold=threshold).passed
            if ok:
                assert found == r
                break
            assert r != found

    def test_orders_monotone_in_threshold(self, bench_interface):
        bench, k_outer, omega, ops = self.setup_bench(bench_interface)
        loose = mor.minimal_order_search(
            list(bench.systems), ["cb", "cb"], bench.interfaces, ops[:1],
            omega, k_outer, threshold=0.2, names=list(bench.names),
            refine=False,
        )
        tight = mor.minimal_order_search(
            list(bench.systems), ["cb", "cb"], bench.interfaces, ops[:1],
            omega, k_outer, threshold=0.05, names=list(bench.names),
            refine=False,
        )
        for name in bench.names:
            assert loose.combined_orders[name] <= tight.combined_orders[name]

    def test_final_report_and_tables(self, bench_interface):
        bench, k_outer, omega, ops = self.setup_bench(bench_interface)
        result = mor.minimal_order_search(
            list(bench.systems), ["cb", "cb"], bench.interfaces, ops, omega,
            k_outer, threshold=0.1, names=list(bench.names), refine=False,
        )
        assert result.final_report.passed
        rows = result.table_final()
        assert rows[-1]["subsystem"] == "total"
        for row in rows[:-1]:
            expected = round(100.0 * (1.0 - row["r"] / row["n"]), 1)
            assert row["reduction_pct"] == expected
        per_op = result.table_per_op()
        assert len(per_op) == 2 * len(ops)

    def test_reduction_percentage_formula_documented_value(self):
        # the report prints its own formula's value, never an external one
        result = mor.OrderSearchResult(
            names=("s1",), methods=("bt",), full_orders=(646,),
            per_op_orders={"s1": [118]}, combined_steps={"s1": 118},
            combined_orders={"s1": 118}, witnesses={"s1": None},
            final_report=None, threshold=0.1, n_evaluations=0,
        )
        row = result.table_final()[0]
        assert row["reduction_pct"] == 81.7
