import csv
import json
import math
import random
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from docuforge.degrade import DatasetManifest, Record, build_dataset, synth_corpus
from docuforge.errors import InvalidArgument
from docuforge.image import ImageTensor, load_image, psnr, save_image
from docuforge.nets import NetSpec, build
from docuforge.report import EvalReport, compare, evaluate, per_kernel_plot, render_per_kernel
from docuforge.train import Checkpoint, TrainConfig

TABLE1 = json.loads((Path(__file__).parent / "data" / "table1.json").read_text())
TABLE1_MARGINS = {"background": 4.150, "blur": 11.098, "watermark": 4.668, "fade": 6.246}


def fixture_reports(table=TABLE1, manifest="m"):
    return [EvalReport(task, model, manifest=manifest, mean_psnr_db=v)
            for task, row in table.items() for model, v in row.items()]


@pytest.fixture(scope="module")
def blur_test(tmp_path_factory):
    root = tmp_path_factory.mktemp("rep")
    synth_corpus(root / "corpus", 4, 32, 32, seed=0)
    return build_dataset(root / "corpus", "blur", {"train": 2, "test_groups": 16, "group_size": 2}, 0, root)["test"]


def identity_ckpt():
    g = build(NetSpec("cgan_generator", base_width=4, depth=3), seed=0).to(torch.float64)
    with torch.no_grad():
        g.module.trunk[-1].weight.zero_()
        g.module.trunk[-1].bias.zero_()
    return Checkpoint({"G": g}, TrainConfig(task="blur", model="cgan", patch_size=32))


class TestEvaluate:
    def test_baseline_is_direct_psnr(self, blur_test):
        rep = evaluate(blur_test)
        assert rep.model == "none" and len(rep.per_image) == 32
        direct = [psnr(load_image(c), load_image(n)).psnr_db for n, c, _ in blur_test.pairs()]
        assert rep.mean_psnr_db == pytest.approx(np.mean(direct), rel=1e-12)
        assert sorted(rep.per_group_mean) == [f"k{i:02d}" for i in range(16)]

    def test_baseline_is_pure(self, blur_test):
        assert evaluate(blur_test).to_json() == evaluate(blur_test).to_json()

    def test_identity_generator_matches_baseline(self, blur_test):
        base, ident = evaluate(blur_test), evaluate(blur_test, identity_ckpt())
        assert ident.model == "cgan"
        assert [r["psnr_db"] for r in ident.per_image] == [r["psnr_db"] for r in base.per_image]
        assert ident.mean_psnr_db == base.mean_psnr_db and ident.manifest == base.manifest

    def test_noisy_equals_clean(self, tmp_path):
        recs = []
        for i in range(3):
            save_image(ImageTensor(np.full((8, 8, 1), 40 * i), "uint8"), tmp_path / f"{i}.png")
            recs.append(Record(f"{i}.png", f"{i}.png"))
        rep = evaluate(DatasetManifest("fade", "test", "paired", recs, tmp_path))
        assert all(r["psnr_db"] == math.inf for r in rep.per_image)
        assert rep.mean_psnr_db is None and rep.excluded_infinite_count == 3
        back = EvalReport.from_json(json.loads(json.dumps(rep.to_json())))
        assert back.per_image[0]["psnr_db"] == math.inf and back.excluded_infinite_count == 3

    def test_unpaired_rejected(self, tmp_path):
        m = DatasetManifest("fade", "test", "unpaired", [Record("a.png", None)], tmp_path)
        with pytest.raises(InvalidArgument):
            evaluate(m)

    def test_report_file_round_trip(self, blur_test, tmp_path):
        rep = evaluate(blur_test)
        rep.save(tmp_path / "r.json")
        data = json.loads((tmp_path / "r.json").read_text())
        assert {"task", "model", "mean_psnr_db", "excluded_infinite_count", "per_group_mean", "per_image"} <= set(data)
        assert EvalReport.load(tmp_path / "r.json").to_json() == rep.to_json()


class TestAggregates:
    def test_infinite_excluded(self):
        rep = EvalReport.from_images("fade", "none", [{"psnr_db": 10.0}, {"psnr_db": math.inf}, {"psnr_db": 20.0}])
        assert rep.mean_psnr_db == 15.0 and rep.excluded_infinite_count == 1

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 60), min_size=1, max_size=20), st.integers(0, 1000))
    def test_mean_permutation_invariant(self, vals, seed):
        rows = [{"psnr_db": v, "group": f"k{i % 3:02d}"} for i, v in enumerate(vals)]
        shuffled = rows[:]
        random.Random(seed).shuffle(shuffled)
        a = EvalReport.from_images("blur", "none", rows)
        b = EvalReport.from_images("blur", "none", shuffled)
        assert a.mean_psnr_db == pytest.approx(b.mean_psnr_db, rel=1e-12)
        assert a.per_group_mean.keys() == b.per_group_mean.keys()
        assert set(a.per_group_mean) <= {r["group"] for r in rows}


class TestCompare:
    def test_table1_fixture(self):
        table = compare(fixture_reports())
        assert [r.task for r in table.rows] == ["background", "blur", "watermark", "fade"]
        for row in table.rows:
            assert row.winner == "cyclegan"
            assert row.margin_db == pytest.approx(TABLE1_MARGINS[row.task], abs=5e-4)
        lines = table.to_csv().splitlines()
        assert lines[0] == "task,cgan,cyclegan,winner,margin_db"
        assert lines[1] == "background,27.624,31.774,cyclegan,4.150"
        assert "31.774 *" in table.to_text()

    def test_single_report(self):
        table = compare([EvalReport("fade", "cyclegan", mean_psnr_db=30.0)])
        assert table.models == ["cyclegan"]
        assert table.rows[0].winner is None and table.rows[0].margin_db is None
        assert "*" not in table.to_text().splitlines()[2]

    @settings(max_examples=40, deadline=None)
    @given(st.floats(0, 50), st.floats(0, 50))
    def test_swapping_columns_swaps_winner(self, a, b):
        first = compare([EvalReport("fade", "cgan", mean_psnr_db=a), EvalReport("fade", "cyclegan", mean_psnr_db=b)])
        second = compare([EvalReport("fade", "cgan", mean_psnr_db=b), EvalReport("fade", "cyclegan", mean_psnr_db=a)])
        w1, w2 = first.rows[0].winner, second.rows[0].winner
        if a != b:
            assert {w1, w2} == {"cgan", "cyclegan"}
            assert first.rows[0].margin_db == second.rows[0].margin_db == abs(a - b)

    def test_mismatched_manifests(self):
        with pytest.raises(InvalidArgument):
            compare([EvalReport("fade", "cgan", manifest="x", mean_psnr_db=1.0),
                     EvalReport("fade", "cyclegan", manifest="y", mean_psnr_db=2.0)])

    def test_duplicate_model(self):
        with pytest.raises(InvalidArgument):
            compare([EvalReport("fade", "cgan", mean_psnr_db=1.0), EvalReport("fade", "cgan", mean_psnr_db=2.0)])

    def test_plot_is_svg(self, tmp_path):
        compare(fixture_reports()).plot(tmp_path / "c.svg")
        root = ET.parse(tmp_path / "c.svg").getroot()
        assert root.tag.endswith("svg")


def group_report(model, fn, n=16):
    return EvalReport("blur", model, per_group_mean={f"k{i:02d}": fn(i) for i in range(n)})


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestPerKernel:
    def test_two_series_give_32_rows(self, tmp_path):
        c, s = per_kernel_plot([group_report("cyclegan", lambda k: 30.0), group_report("cgan", lambda k: 20.0)], tmp_path)
        rows = read_rows(c)
        assert len(rows) == 32
        assert [r["model"] for r in rows[:16]] == ["cgan"] * 16
        assert [r["group"] for r in rows[:16]] == [f"k{i:02d}" for i in range(16)]
        assert s.exists()

    def test_flat_series(self, tmp_path):
        c, _ = per_kernel_plot(group_report("cyclegan", lambda k: 25.5), tmp_path)
        assert {float(r["mean_psnr_db"]) for r in read_rows(c)} == {25.5}

    def test_increasing_fixture(self, tmp_path):
        c, _ = per_kernel_plot(group_report("cgan", lambda k: 20.0 + k), tmp_path)
        rows = read_rows(c)
        vals = [float(r["mean_psnr_db"]) for r in sorted(rows, key=lambda r: int(r["group_index"]))]
        assert vals == [20.0 + k for k in range(16)]
        assert all(b > a for a, b in zip(vals, vals[1:]))

    def test_bank_order_not_lexical_insertion(self, tmp_path):
        rep = EvalReport("blur", "cgan", per_group_mean={"k10": 1.0, "k02": 2.0, "k00": 3.0})
        c, _ = per_kernel_plot(rep, tmp_path)
        assert [r["group"] for r in read_rows(c)] == ["k00", "k02", "k10"]

    def test_needs_two_groups(self, tmp_path):
        with pytest.raises(InvalidArgument):
            per_kernel_plot(EvalReport("blur", "cgan"), tmp_path)
        with pytest.raises(InvalidArgument):
            per_kernel_plot(group_report("cgan", float, n=1), tmp_path)

    def test_plot_drawn_from_csv(self, tmp_path):
        c, s = per_kernel_plot(group_report("cgan", lambda k: 20.0 + k), tmp_path)
        # editing the CSV and re-rendering changes the plot; the original render matches a fresh one
        again = render_per_kernel(c, tmp_path / "again.svg")
        assert again.read_bytes() == s.read_bytes()
        text = c.read_text().replace("35.0", "10.0")
        c.write_text(text)
        assert render_per_kernel(c, tmp_path / "edited.svg").read_bytes() != s.read_bytes()

    def test_real_blur_report(self, blur_test, tmp_path):
        c, _ = per_kernel_plot(evaluate(blur_test), tmp_path)
        assert len(read_rows(c)) == 16
