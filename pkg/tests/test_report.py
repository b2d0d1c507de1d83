from diagdenoise.report import figure_path_for, render_bench_figure, render_train_figure
from diagdenoise.step_planner import CostModel, parse_schedule, simulate


def test_figure_path_next_to_csv(tmp_path):
    assert figure_path_for(tmp_path / "bench.csv") == tmp_path / "bench.png"


def test_render_bench_figure(tmp_path):
    reports = [simulate(parse_schedule(d), CostModel()) for d in ("4322222", "4222222")]
    out = render_bench_figure(reports, tmp_path / "bench.png")
    assert out.exists() and out.stat().st_size > 0


def test_render_train_figure_gaussian_columns(tmp_path):
    rows = [{"step": i, "L_DMD": 1.0 / (i + 1), "L_reg": 0.5, "L_DMD_flow": 0.3,
             "L_reg_flow": 0.2, "total": 2.0 / (i + 1), "bias_gap": 1.0 / (i + 1)}
            for i in range(10)]
    out = render_train_figure(rows, tmp_path / "train.png")
    assert out.exists() and out.stat().st_size > 0


def test_render_train_figure_toy_columns(tmp_path):
    rows = [{"step": i, "L_DMD": 1.0, "L_reg": 0.5, "L_DMD_flow": 0.3,
             "L_reg_flow": 0.2, "total": 2.0} for i in range(5)]
    out = render_train_figure(rows, tmp_path / "toy.png")
    assert out.exists() and out.stat().st_size > 0
