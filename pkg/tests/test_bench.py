import numpy as np
import pytest

from freqrobust.bench import (
    DEFAULT_SIGMAS,
    DEFAULT_WIDTHS,
    AccuracyGrid,
    MissingCellError,
    compare,
    emit_report,
    load_reference,
    parse_report_csv,
    run_grid,
    trend_checks,
)
from freqrobust.dataio import GridSpec, LabeledDataset, Manifest, generate_test_grid
from freqrobust.imgfreq import FilterKind
from freqrobust.nnet import Checkpoint, build_model

HP, LP = FilterKind.HIGH, FilterKind.LOW


def uniform_grid(acc=0.5, clean=0.5):
    cells = {(k, s, w): acc for k in (HP, LP) for s in DEFAULT_SIGMAS for w in DEFAULT_WIDTHS}
    return AccuracyGrid(clean, cells)


def constant_checkpoint(cls=3):
    net = build_model("desk", 10, seed=0)
    state = net.state()
    state["fc.weight"][...] = 0
    state["fc.bias"][...] = 0
    state["fc.bias"][cls] = 1
    return Checkpoint(state, "desk", 10, [0.5] * 3, [0.25] * 3)


@pytest.fixture(scope="module")
def balanced_grid_dir(tmp_path_factory):
    rng = np.random.default_rng(0)
    ds = LabeledDataset(rng.random((20, 32, 32, 3)).astype(np.float32), np.repeat(np.arange(10), 2), 10, "bal")
    out = tmp_path_factory.mktemp("grid")
    generate_test_grid(ds, GridSpec(), out)
    return out


class TestRunGrid:
    def test_constant_model_scores_chance(self, balanced_grid_dir):
        grid = run_grid(constant_checkpoint(), Manifest.read(balanced_grid_dir / "manifest.ini"))
        assert grid.clean_accuracy == pytest.approx(0.1)
        assert len(grid.cells) == 36
        assert all(v == pytest.approx(0.1) for v in grid.cells.values())

    def test_half_highpass_half_lowpass(self, balanced_grid_dir):
        grid = run_grid(constant_checkpoint(), Manifest.read(balanced_grid_dir / "manifest.ini"))
        kinds = [k[0] for k in grid.cells]
        assert kinds.count(HP) == 18 and kinds.count(LP) == 18

    def test_idempotent_and_thread_invariant(self, balanced_grid_dir):
        ck = Checkpoint.from_model(build_model(seed=4), [0.5] * 3, [0.25] * 3)
        man = Manifest.read(balanced_grid_dir / "manifest.ini")
        a, b, c = run_grid(ck, man), run_grid(ck, man), run_grid(ck, man, threads=3)
        assert a.cells == b.cells == c.cells
        assert a.clean_accuracy == c.clean_accuracy

    def test_missing_cell_is_named(self, balanced_grid_dir, tmp_path):
        man = Manifest.read(balanced_grid_dir / "manifest.ini")
        victim = man.cells[7]
        victim.path = tmp_path / "gone.bin"
        with pytest.raises(MissingCellError) as err:
            run_grid(constant_checkpoint(), man)
        spec = victim.spec
        assert err.value.key == (spec.kind, spec.sigma, spec.width)
        assert spec.kind.value in str(err.value) and f"width={spec.width}" in str(err.value)

    def test_class_count_mismatch(self, balanced_grid_dir):
        ck = constant_checkpoint()
        ck.num_classes = 5
        with pytest.raises(ValueError):
            run_grid(ck, Manifest.read(balanced_grid_dir / "manifest.ini"))


class TestGrid:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            AccuracyGrid(1.2, {})
        with pytest.raises(ValueError):
            AccuracyGrid(0.5, {(HP, 0.5, 2): -0.1})

    def test_keys_accept_strings(self):
        g = AccuracyGrid(0.9, {("HighPass", "0.5", "2"): 0.3})
        assert g[(HP, 0.5, 2)] == 0.3


class TestReference:
    def test_table1_values(self):
        g = load_reference("cifar10_baseline")
        assert g.clean_accuracy == pytest.approx(0.9495)
        assert g[(HP, 0.5, 2)] == pytest.approx(0.5813)
        assert g[(HP, 0.5, 7)] == pytest.approx(0.1794)
        assert g.is_default()

    def test_reemit_contains_table1_cells(self):
        text = emit_report(load_reference("cifar10_baseline"), "csv")
        assert "Clean,,,94.95" in text.splitlines()
        assert "HighPass,0.5,2,58.13" in text.splitlines()
        assert "LowPass,0.5,2,93.89" in text.splitlines()

    def test_all_tables_load(self):
        for name in ("cifar10_stochastic", "tinyimagenet_baseline", "tinyimagenet_stochastic"):
            assert len(load_reference(name).cells) == 36

    def test_unknown_table(self):
        with pytest.raises(ValueError):
            load_reference("imagenet")


class TestTrendChecks:
    def test_table1_passes(self):
        checks = trend_checks(load_reference("cifar10_baseline"))
        assert len(checks) == 4 and all(c.passed for c in checks)

    def test_uniform_passes(self):
        assert all(c.passed for c in trend_checks(uniform_grid()))

    def test_adversarial_width_fails_a(self):
        g = uniform_grid()
        for s in DEFAULT_SIGMAS:
            for i, w in enumerate(DEFAULT_WIDTHS):
                g.cells[(HP, s, w)] = 0.40 + 0.02 * i  # +10 points from w=2 to w=7
        result = {c.name: c.passed for c in trend_checks(g)}
        assert result["highpass_width"] is False
        assert result["lowpass_sigma"] is True

    def test_slack_boundary(self):
        g = uniform_grid()
        g.cells[(LP, 1.5, 4)] = 0.52  # exactly +2 points: admitted
        assert all(c.passed for c in trend_checks(g))
        g.cells[(LP, 1.5, 4)] = 0.521
        failed = [c for c in trend_checks(g) if not c.passed]
        assert [c.name for c in failed] == ["lowpass_sigma"] and "width=4" in failed[0].details

    def test_clean_check(self):
        g = uniform_grid(clean=0.3)
        assert not {c.name: c.passed for c in trend_checks(g)}["clean_above_highpass"]
        assert all(c.passed for c in trend_checks(g, slack=25.0))

    def test_incomplete_rejected(self):
        g = uniform_grid()
        del g.cells[(HP, 1.0, 4)]
        with pytest.raises(ValueError):
            trend_checks(g)


class TestCompare:
    def test_paper_deltas(self):
        c = compare(load_reference("cifar10_baseline"), load_reference("cifar10_stochastic"))
        assert round(100 * c.deltas[(HP, 1.0, 7)], 2) == 70.83
        assert round(100 * c.clean_delta, 2) == -1.01

    def test_identical_zero(self):
        g = load_reference("cifar10_baseline")
        c = compare(g, g)
        assert all(d == 0 for d in c.deltas.values()) and c.clean_delta == 0

    def test_antisymmetric(self):
        a, b = load_reference("tinyimagenet_baseline"), load_reference("tinyimagenet_stochastic")
        ab, ba = compare(a, b), compare(b, a)
        assert all(ab.deltas[k] == -ba.deltas[k] for k in ab.deltas)

    def test_summary(self):
        base = uniform_grid(0.5)
        treated = uniform_grid(0.5)
        treated.cells[(LP, 1.0, 3)] = 0.3
        for w in DEFAULT_WIDTHS:
            treated.cells[(HP, 0.5, w)] = 0.8
        s = compare(base, treated).summary()
        assert s["worst_cell"] == "LowPass/1/3" and s["worst_delta"] == pytest.approx(-0.2)
        assert s["mean_delta_HighPass"] == pytest.approx(0.3 * 6 / 18)
        assert s["mean_delta_LowPass"] == pytest.approx(-0.2 / 18)

    def test_key_mismatch(self):
        a = uniform_grid()
        b = uniform_grid()
        del b.cells[(LP, 0.5, 2)]
        with pytest.raises(ValueError):
            compare(a, b)


class TestReport:
    def test_markdown_layout(self):
        md = emit_report(load_reference("cifar10_baseline"), "markdown")
        lines = md.splitlines()
        headers = [l for l in lines if l.startswith("| Sigma")]
        assert len(headers) == 2
        assert all(l.count("|") == 8 for l in headers)
        rows = [l for l in lines if l.startswith("| 0.5") or l.startswith("| 1 ") or l.startswith("| 1.5")]
        assert len(rows) == 6 and all(len(r.strip("|").split("|")) == 7 for r in rows)
        assert "| 0.5 | 58.13 | 17.59 | 17.77 | 17.94 | 17.94 | 17.94 |" in lines
        assert "94.95" in lines[0]

    def test_markdown_comparison(self):
        c = compare(load_reference("cifar10_baseline"), load_reference("cifar10_stochastic"))
        md = emit_report(c, "markdown")
        assert "84.87 (+70.83)" in md
        assert "93.94 (-1.01" in md

    def test_csv_comparison(self):
        c = compare(load_reference("cifar10_baseline"), load_reference("cifar10_stochastic"))
        lines = emit_report(c, "csv").splitlines()
        assert lines[0] == "kind,sigma,width,accuracy,delta"
        assert lines[1] == "Clean,,,93.94,-1.01"
        assert "HighPass,1,7,84.87,+70.83" in lines
        assert len(lines) == 38

    def test_incomplete_rejected(self):
        with pytest.raises(ValueError):
            emit_report(AccuracyGrid(0.5, {}), "csv")
        g = uniform_grid()
        del g.cells[(HP, 1.5, 7)]
        with pytest.raises(ValueError):
            emit_report(g, "markdown")

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report(uniform_grid(), "html")

    def test_no_negative_zero(self):
        assert "-0.00" not in emit_report(compare(uniform_grid(), uniform_grid()), "csv")

    @pytest.mark.parametrize("seed", range(5))
    def test_csv_round_trip(self, seed):
        rng = np.random.default_rng(seed)
        g = AccuracyGrid(float(rng.random()), {k: float(rng.random()) for k in uniform_grid().cells})
        back = parse_report_csv(emit_report(g, "csv"))
        assert abs(back.clean_accuracy - g.clean_accuracy) * 100 <= 0.005 + 1e-12
        assert max(abs(back.cells[k] - g.cells[k]) for k in g.cells) * 100 <= 0.005 + 1e-12

    def test_comparison_round_trip(self):
        c = compare(load_reference("cifar10_baseline"), load_reference("cifar10_stochastic"))
        back = parse_report_csv(emit_report(c, "csv"))
        for k in c.deltas:
            assert back.deltas[k] == pytest.approx(c.deltas[k], abs=1e-9)
            assert back.baseline.cells[k] == pytest.approx(c.baseline.cells[k], abs=1e-9)
