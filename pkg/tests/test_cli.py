import xml.etree.ElementTree as ET

import numpy as np
import pytest

from xpl.cli import (
    ABLATE_CSV_HEADER,
    EVAL_CSV_HEADER,
    TRAIN_CSV_HEADER,
    fmt,
    main,
)


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def gen_args():
    return [
        "--n-labeled", 6, "--n-unlabeled", 20, "--n-test", 8, "--n-openset", 6,
        "--n-categories", 5, "--n-openset-categories", 1,
    ]


@pytest.fixture(scope="module")
def dataset_path(tmp_path_factory, gen_args):
    path = tmp_path_factory.mktemp("data") / "ds.txt"
    assert run_cli("generate", "--seed", 5, "--out", path, *gen_args) == 0
    return path


TRAIN_ARGS = [
    "--total-epochs", 4, "--warmup-epochs", 1, "--batch-size", 8,
    "--learning-rate", 0.2, "--hidden-a", "10", "--hidden-b", "8", "--embed-dim", "6",
]


class TestGenerate:
    def test_deterministic_output(self, tmp_path, gen_args):
        a, b = tmp_path / "a.txt", tmp_path / "b.txt"
        assert run_cli("generate", "--seed", 7, "--out", a, *gen_args) == 0
        assert run_cli("generate", "--seed", 7, "--out", b, *gen_args) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_missing_seed_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            run_cli("generate", "--out", tmp_path / "x.txt")
        assert exc.value.code == 2

    def test_generated_counts_match_config(self, dataset_path):
        from xpl.synthdata import load_dataset

        ds = load_dataset(dataset_path)
        assert len(ds.by_split("labeled")) == 6
        assert len(ds.by_split("unlabeled")) == 20
        assert len(ds.by_split("test")) == 8
        assert len(ds.by_split("openset_test")) == 6

    def test_manifest_written(self, dataset_path):
        manifest = dataset_path.with_name(dataset_path.name + ".manifest")
        text = manifest.read_text()
        assert "command=generate" in text
        assert "seed=5" in text


@pytest.fixture(scope="module")
def outdir(tmp_path_factory, dataset_path):
    out = tmp_path_factory.mktemp("run")
    code = run_cli(
        "train", "--seed", 1, "--dataset", dataset_path, "--outdir", out,
        "--mode", "sup_only", *TRAIN_ARGS,
    )
    assert code == 0
    return out


class TestTrain:

    def test_csv_header_exact(self, outdir):
        first_line = (outdir / "metrics.csv").read_text().splitlines()[0]
        assert first_line == TRAIN_CSV_HEADER

    def test_sup_only_selection_column(self, outdir):
        rows = (outdir / "metrics.csv").read_text().splitlines()[1:]
        n_selected = [row.split(",")[9] for row in rows]
        assert n_selected == ["6"] * 4

    def test_svg_well_formed_with_three_polylines(self, outdir):
        root = ET.fromstring((outdir / "ciou_curve.svg").read_text())
        polylines = root.findall(".//{http://www.w3.org/2000/svg}polyline")
        assert len(polylines) == 3

    def test_checkpoint_and_bank_written(self, outdir):
        assert (outdir / "checkpoint.txt").exists()
        assert (outdir / "bank.txt").exists()
        assert "command=train" in (outdir / "manifest.txt").read_text()

    def test_byte_identical_rerun(self, tmp_path, dataset_path):
        outs = []
        for name in ("r1", "r2"):
            out = tmp_path / name
            run_cli(
                "train", "--seed", 9, "--dataset", dataset_path, "--outdir", out, *TRAIN_ARGS
            )
            outs.append(out)
        assert (outs[0] / "metrics.csv").read_bytes() == (outs[1] / "metrics.csv").read_bytes()
        assert (outs[0] / "checkpoint.txt").read_bytes() == (outs[1] / "checkpoint.txt").read_bytes()
        assert (outs[0] / "ciou_curve.svg").read_bytes() == (outs[1] / "ciou_curve.svg").read_bytes()


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_path):
    out = tmp_path_factory.mktemp("trained")
    run_cli("train", "--seed", 2, "--dataset", dataset_path, "--outdir", out, *TRAIN_ARGS)
    return out


class TestEvaluate:

    def test_reproduces_final_training_metrics(self, tmp_path, dataset_path, trained):
        out_csv = tmp_path / "eval.csv"
        code = run_cli(
            "evaluate", "--seed", 2, "--dataset", dataset_path,
            "--checkpoint", trained / "checkpoint.txt", "--out", out_csv,
        )
        assert code == 0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == EVAL_CSV_HEADER
        final = (trained / "metrics.csv").read_text().splitlines()[-1].split(",")
        ciou_a, auc_a, ciou_b, auc_b = final[1], final[2], final[3], final[4]
        test_rows = {r.split(",")[1]: r.split(",") for r in lines[1:] if r.startswith("test,")}
        assert test_rows["A"][2] == ciou_a and test_rows["A"][3] == auc_a
        assert test_rows["B"][2] == ciou_b and test_rows["B"][3] == auc_b

    def test_openset_rows_present_iff_split_exists(self, tmp_path, trained, dataset_path, gen_args):
        out_csv = tmp_path / "eval.csv"
        run_cli(
            "evaluate", "--seed", 2, "--dataset", dataset_path,
            "--checkpoint", trained / "checkpoint.txt", "--out", out_csv,
        )
        splits = {r.split(",")[0] for r in out_csv.read_text().splitlines()[1:]}
        assert splits == {"test", "openset_test"}

        no_open = tmp_path / "no_open.txt"
        run_cli(
            "generate", "--seed", 5, "--out", no_open,
            "--n-labeled", 6, "--n-unlabeled", 20, "--n-test", 8, "--n-openset", 0,
            "--n-categories", 5, "--n-openset-categories", 1,
        )
        out2 = tmp_path / "eval2.csv"
        run_cli(
            "evaluate", "--seed", 2, "--dataset", no_open,
            "--checkpoint", trained / "checkpoint.txt", "--out", out2,
        )
        splits2 = {r.split(",")[0] for r in out2.read_text().splitlines()[1:]}
        assert splits2 == {"test"}

    def test_dimension_mismatch_is_runtime_error(self, tmp_path, trained):
        other = tmp_path / "wide.txt"
        run_cli(
            "generate", "--seed", 5, "--out", other,
            "--n-labeled", 4, "--n-unlabeled", 4, "--n-test", 4, "--n-openset", 0,
            "--n-categories", 4, "--n-openset-categories", 1, "--c-visual", 9,
        )
        code = run_cli(
            "evaluate", "--seed", 2, "--dataset", other,
            "--checkpoint", trained / "checkpoint.txt", "--out", tmp_path / "x.csv",
        )
        assert code == 1

    def test_missing_dataset_is_runtime_error(self, tmp_path, trained):
        code = run_cli(
            "evaluate", "--seed", 2, "--dataset", tmp_path / "absent.txt",
            "--checkpoint", trained / "checkpoint.txt", "--out", tmp_path / "x.csv",
        )
        assert code == 1


@pytest.fixture(scope="module")
def ablation(tmp_path_factory, dataset_path):
    out = tmp_path_factory.mktemp("ablate")
    code = run_cli(
        "ablate", "--seed", 3, "--dataset", dataset_path, "--outdir", out,
        "--n-seeds", 2, *TRAIN_ARGS,
    )
    assert code == 0
    return out / "ablation.csv"


class TestAblate:

    def test_configuration_count(self, ablation):
        lines = ablation.read_text().splitlines()
        assert lines[0] == ABLATE_CSV_HEADER
        run_rows = [l for l in lines[1:] if l.split(",")[1] != "median"]
        assert len(run_rows) == 12 * 2  # 7 components + 5 beta values, 2 seeds
        configs = {l.split(",")[0] for l in run_rows}
        assert len(configs) == 12

    def test_summary_medians_recomputable(self, ablation):
        lines = ablation.read_text().splitlines()[1:]
        runs: dict[str, list[list[float]]] = {}
        medians: dict[str, list[str]] = {}
        for line in lines:
            parts = line.split(",")
            if parts[1] == "median":
                medians[parts[0]] = parts[2:]
            else:
                runs.setdefault(parts[0], []).append([float(x) for x in parts[2:]])
        assert set(medians) == set(runs)
        for name, rows in runs.items():
            expected = [fmt(float(np.median(col))) for col in zip(*rows)]
            assert medians[name] == expected

    def test_rerun_is_byte_identical(self, tmp_path, dataset_path):
        outs = []
        for name in ("x", "y"):
            out = tmp_path / name
            run_cli(
                "ablate", "--seed", 4, "--dataset", dataset_path, "--outdir", out,
                "--n-seeds", 1, "--total-epochs", 3, "--warmup-epochs", 1,
                "--batch-size", 8, "--learning-rate", 0.2,
                "--hidden-a", "10", "--hidden-b", "8", "--embed-dim", "6",
            )
            outs.append(out / "ablation.csv")
        assert outs[0].read_bytes() == outs[1].read_bytes()


class TestConfigFile:
    def test_file_values_and_flag_precedence(self, tmp_path, dataset_path):
        config = tmp_path / "run.cfg"
        config.write_text("total_epochs=3\nwarmup_epochs=1\nbatch_size=8\n"
                          "learning_rate=0.2\nhidden_a=10\nhidden_b=8\nembed_dim=6\n"
                          "mode=sup_only\n")
        out1 = tmp_path / "from_file"
        run_cli("train", "--seed", 8, "--dataset", dataset_path, "--outdir", out1,
                "--config", config)
        rows1 = (out1 / "metrics.csv").read_text().splitlines()
        assert len(rows1) == 1 + 3  # header + total_epochs from file

        out2 = tmp_path / "overridden"
        run_cli("train", "--seed", 8, "--dataset", dataset_path, "--outdir", out2,
                "--config", config, "--total-epochs", 5)
        rows2 = (out2 / "metrics.csv").read_text().splitlines()
        assert len(rows2) == 1 + 5  # flag wins over file

    def test_malformed_config_is_runtime_error(self, tmp_path, dataset_path):
        config = tmp_path / "bad.cfg"
        config.write_text("this is not a key value line\n")
        code = run_cli("train", "--seed", 8, "--dataset", dataset_path,
                       "--outdir", tmp_path / "o", "--config", config)
        assert code == 1


class TestFmt:
    def test_six_significant_digits(self):
        assert fmt(89.28000031) == "89.28"
        assert fmt(1234567.0) == "1.23457e+06"
        assert fmt(float("nan")) == "nan"
        assert fmt(13) == "13"
        assert fmt(0.000123456789) == "0.000123457"
