import csv
import json

import numpy as np
import pytest

from amoekit.cli import main
from amoekit.formats import read_emb, read_ids, write_emb

from fixtures import DINO_GLOBAL, SIGLIP_GLOBAL, TOTAL, write_loss_fixture, write_manifest


def run(*args):
    return main([str(a) for a in args])


def files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_pack_basic_and_deterministic(tmp_path):
    m = write_manifest(tmp_path / "m.jsonl", [(224, 224), (512, 384), (64, 64)])
    assert run("pack", "--out", tmp_path / "a", "--manifest", m, "--seed", 3) == 0
    plan = json.loads((tmp_path / "a" / "plan.json").read_text())
    assert len(plan["sequences"]) >= 1
    stats = json.loads((tmp_path / "a" / "stats.json").read_text())
    assert 0 <= stats["padding_fraction"] <= stats["singleton_padding_fraction"]
    resolved = json.loads((tmp_path / "a" / "config.resolved.json").read_text())
    assert resolved["c_max"] == 2600 and resolved["seed"] == 3 and "out" not in resolved
    assert run("pack", "--out", tmp_path / "b", "--manifest", m, "--seed", 3, "--threads", 8) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")


def test_pack_oversized_image(tmp_path, caplog):
    m = write_manifest(tmp_path / "m.jsonl", [(64, 64), (4096, 4096)])
    assert run("pack", "--out", tmp_path / "o", "--manifest", m) == 2
    assert "img1" in caplog.text


def test_config_file_and_flag_precedence(tmp_path):
    m = write_manifest(tmp_path / "m.jsonl", [(64, 64)] * 5)
    (tmp_path / "c.json").write_text(json.dumps({"c_max": 100, "seed": 9}))
    assert run("pack", "--out", tmp_path / "o", "--manifest", m, "--config", tmp_path / "c.json", "--seed", 1) == 0
    resolved = json.loads((tmp_path / "o" / "config.resolved.json").read_text())
    assert resolved["c_max"] == 100 and resolved["seed"] == 1


def test_missing_input_is_io_error(tmp_path):
    assert run("pack", "--out", tmp_path / "o", "--manifest", tmp_path / "nope.jsonl") == 1
    assert run("pack", "--out", tmp_path / "o") == 2


def test_blend(tmp_path):
    write_manifest(tmp_path / "hi.jsonl", [(1024, 768)] * 4)
    write_manifest(tmp_path / "lo.jsonl", [(256, 256)] * 4)
    spec = {"pools": [{"name": "hi", "manifest": "hi.jsonl"}, {"name": "lo", "manifest": "lo.jsonl"}],
            "targets": [{"pool": "hi", "resolution_cap": 512, "weight": 0.5},
                        {"pool": "lo", "resolution_cap": 256, "weight": 0.5}]}
    (tmp_path / "spec.json").write_text(json.dumps(spec))
    assert run("blend", "--out", tmp_path / "o", "--spec", tmp_path / "spec.json", "--total", 10) == 0
    stats = json.loads((tmp_path / "o" / "blend_stats.json").read_text())
    assert stats["per_target"] == {"hi@512": 5, "lo@256": 5}
    rows = [json.loads(x) for x in (tmp_path / "o" / "blend.jsonl").read_text().splitlines()]
    assert len({r["id"] for r in rows}) == 10
    assert all(max(r["width"], r["height"]) <= 512 for r in rows)
    # The blend manifest is a valid pack manifest.
    assert run("pack", "--out", tmp_path / "p", "--manifest", tmp_path / "o" / "blend.jsonl") == 0


def test_phis_round_trip_and_diagnose(tmp_path, rng):
    x = (rng.normal(size=(400, 8)) * rng.uniform(0.5, 5, size=8) + 2).astype(np.float32)
    write_emb(tmp_path / "dino.emb", x)
    out = tmp_path / "o"
    assert run("phis", "fit", "--out", out, "--input", tmp_path / "dino.emb") == 0
    assert run("phis", "apply", "--out", out, "--input", tmp_path / "dino.emb",
               "--transform", out / "dino.phis.json") == 0
    assert run("phis", "invert", "--out", out, "--input", out / "dino.phis.emb",
               "--transform", out / "dino.phis.json") == 0
    back = read_emb(out / "dino.phis.inv.emb")
    assert np.abs(back - x).max() <= 1e-5 * max(1.0, np.abs(x).max())

    shift = np.zeros(8, np.float32)
    shift[0] = 10
    bi = np.concatenate([x[:200] - x.mean(0) + shift, x[200:] - x.mean(0) - shift])
    write_emb(tmp_path / "bi.emb", bi)
    assert run("phis", "diagnose", "--out", out, "--input", f"bi={tmp_path / 'bi.emb'}") == 0
    diag = json.loads((out / "diagnose.json").read_text())
    assert diag["streams"]["bi"]["flagged"] is True

    write_emb(tmp_path / "one.emb", x[:1])
    assert run("phis", "fit", "--out", out, "--input", tmp_path / "one.emb") == 2


def _blobs(rng, sizes, d=8):
    centers = rng.normal(scale=20, size=(len(sizes), d))
    return np.concatenate([rng.normal(size=(s, d)) + c for s, c in zip(sizes, centers)]).astype(np.float32)


def test_curate_outputs_and_identity(tmp_path, rng):
    x = _blobs(rng, [300, 60, 30, 10])
    write_emb(tmp_path / "s0.emb", x[:200])
    write_emb(tmp_path / "s1.emb", x[200:])
    base = ["curate", "--shard", tmp_path / "s0.emb", "--shard", tmp_path / "s1.emb", "--level-ks", "8,4"]
    assert run(*base, "--out", tmp_path / "a", "--target-n", 40) == 0
    ids = read_ids(tmp_path / "a" / "sampled_ids.txt")
    assert len(ids) == len(set(ids)) == 40
    tree = json.loads((tmp_path / "a" / "tree.json").read_text())
    assert tree["level_sizes"] == [8, 4] and sum(tree["leaf_population"]) == 400
    assert read_emb(tmp_path / "a" / "tree_level2.emb").shape == (4, 8)
    assert run(*base, "--out", tmp_path / "b", "--target-n", 40, "--threads", 8) == 0
    assert files(tmp_path / "a") == files(tmp_path / "b")
    assert run(*base, "--out", tmp_path / "all", "--target-n", 400) == 0
    every = read_ids(tmp_path / "all" / "sampled_ids.txt")
    assert sorted(every) == sorted([f"s0:{i}" for i in range(200)] + [f"s1:{i}" for i in range(200)])


def test_curate_bad_level_ks(tmp_path, rng):
    write_emb(tmp_path / "s.emb", rng.normal(size=(50, 4)).astype(np.float32))
    rc = run("curate", "--out", tmp_path / "o", "--shard", tmp_path / "s.emb", "--level-ks", "4,8", "--target-n", 5)
    assert rc == 2


def test_loss_fixture_matches_hand_values(tmp_path):
    feats = write_loss_fixture(tmp_path / "f")
    assert run("loss", "--out", tmp_path / "on", "--features", feats) == 0
    rep = json.loads((tmp_path / "on" / "loss_report.json").read_text())
    assert rep["teachers"]["siglip2"]["summary"] == pytest.approx((1 - 2 ** -0.5) / 2, abs=1e-8)
    assert rep["teachers"]["siglip2"]["patch"] == pytest.approx(2.0, abs=1e-8)
    assert rep["teachers"]["siglip2"]["global"] == pytest.approx(SIGLIP_GLOBAL, abs=1e-8)
    assert rep["teachers"]["dino"]["register"] == pytest.approx(2.0, abs=1e-8)
    assert rep["teachers"]["dino"]["global"] == pytest.approx(DINO_GLOBAL, abs=1e-8)
    assert rep["teachers"]["siglip2"]["arkd"] == 0.0
    assert rep["total"] == pytest.approx(TOTAL, abs=1e-8) and rep["b_global"] == 2
    assert run("loss", "--out", tmp_path / "sym", "--features", feats, "--arkd", "symmetric") == 0
    sym = json.loads((tmp_path / "sym" / "loss_report.json").read_text())
    assert sym["teachers"]["siglip2"]["arkd"] > 0
    for t in ("siglip2", "dino"):
        assert sym["teachers"][t]["arkd"] >= rep["teachers"][t]["arkd"]


def test_loss_perfect_student_is_zero(tmp_path):
    feats = write_loss_fixture(tmp_path / "f", perfect=True)
    assert run("loss", "--out", tmp_path / "o", "--features", feats, "--arkd", "symmetric") == 0
    rep = json.loads((tmp_path / "o" / "loss_report.json").read_text())
    assert rep["total"] == 0.0


def test_pipeline_curate_pack_loss(tmp_path, rng):
    # Curate a subset, pack those images, then compute losses grouped by the plan.
    n = 60
    emb = _blobs(rng, [30, 20, 10], d=4)
    write_emb(tmp_path / "emb.emb", emb)
    ids = [f"img{i}" for i in range(n)]
    (tmp_path / "ids.txt").write_text("\n".join(ids) + "\n")
    assert run("curate", "--out", tmp_path / "cur", "--shard", tmp_path / "emb.emb", "--ids-file",
               tmp_path / "ids.txt", "--level-ks", "6,3", "--target-n", 12) == 0
    sizes = [(16 * int(rng.integers(1, 5)), 16 * int(rng.integers(1, 5))) for _ in range(n)]
    write_manifest(tmp_path / "m.jsonl", sizes)
    assert run("pack", "--out", tmp_path / "pack", "--manifest", tmp_path / "m.jsonl", "--ids",
               tmp_path / "cur" / "sampled_ids.txt", "--c-max", 40, "--num-ranks", 2) == 0
    chosen = read_ids(tmp_path / "cur" / "sampled_ids.txt")
    ntok = {f"img{i}": (w // 16) * (h // 16) for i, (w, h) in enumerate(sizes)}
    total_tok = sum(ntok[c] for c in chosen)
    d = tmp_path / "f"
    d.mkdir()
    write_emb(d / "ts.emb", rng.normal(size=(12, 4)).astype(np.float32))
    write_emb(d / "ss.emb", rng.normal(size=(12, 4)).astype(np.float32))
    write_emb(d / "tp.emb", rng.normal(size=(total_tok, 4)).astype(np.float32))
    write_emb(d / "sp.emb", rng.normal(size=(total_tok, 4)).astype(np.float32))
    manifest = {"images": [{"id": c, "num_tokens": ntok[c]} for c in chosen],
                "teachers": [{"name": "t", "summary_dim": 4, "patch_dim": 4, "teacher_summary": "ts.emb",
                              "student_summary": "ss.emb", "teacher_patches": "tp.emb",
                              "student_patches": "sp.emb"}]}
    (d / "features.json").write_text(json.dumps(manifest))
    assert run("loss", "--out", tmp_path / "grouped", "--features", d / "features.json",
               "--plan", tmp_path / "pack" / "plan.json") == 0
    assert run("loss", "--out", tmp_path / "flat", "--features", d / "features.json") == 0
    g = json.loads((tmp_path / "grouped" / "loss_report.json").read_text())
    f = json.loads((tmp_path / "flat" / "loss_report.json").read_text())
    assert g["teachers"] == f["teachers"] and g["b_global"] == 12


def test_eval_commands(tmp_path, rng):
    train = rng.normal(size=(30, 5)).astype(np.float32)
    labels = [i % 3 for i in range(30)]
    write_emb(tmp_path / "train.emb", train)
    write_emb(tmp_path / "query.emb", train[:6])
    (tmp_path / "tl.jsonl").write_text("\n".join(map(str, labels)) + "\n")
    (tmp_path / "ql.jsonl").write_text("\n".join(map(str, labels[:6])) + "\n")
    assert run("eval", "knn", "--out", tmp_path / "k", "--train", tmp_path / "train.emb", "--query",
               tmp_path / "query.emb", "--train-labels", tmp_path / "tl.jsonl", "--query-labels",
               tmp_path / "ql.jsonl", "-k", 1) == 0
    res = json.loads((tmp_path / "k" / "metrics.json").read_text())["results"]
    assert res == [{"metric": "top1", "head": "head0", "value": 1.0}]

    (tmp_path / "truth.jsonl").write_text("\n".join(str(i) for i in range(6)) + "\n")
    assert run("eval", "retrieval", "--out", tmp_path / "r", "--query", tmp_path / "query.emb",
               "--gallery", tmp_path / "train.emb", "--truth", tmp_path / "truth.jsonl") == 0
    res = json.loads((tmp_path / "r" / "metrics.json").read_text())["results"]
    assert res[0]["metric"] == "recall@1" and res[0]["value"] == 1.0

    sharp = np.eye(3, dtype=np.float32) * 10
    flat = np.ones((3, 3), np.float32) + np.float32(0.01) * np.roll(np.eye(3, dtype=np.float32), 1, axis=1)
    write_emb(tmp_path / "a.emb", sharp)
    write_emb(tmp_path / "b.emb", flat)
    (tmp_path / "t3.jsonl").write_text("0\n1\n2\n")
    assert run("eval", "ensemble", "--out", tmp_path / "e", "--scores", tmp_path / "a.emb", "--scores",
               tmp_path / "b.emb", "--truth", tmp_path / "t3.jsonl") == 0
    res = {r["head"]: r for r in json.loads((tmp_path / "e" / "metrics.json").read_text())["results"]}
    assert res["head0"]["value"] == 1.0 and res["head1"]["value"] == 0.0 and res["ensemble"]["value"] == 1.0
    assert res["ensemble"]["mean_weights"][0] > res["ensemble"]["mean_weights"][1]


def test_cka_command(tmp_path, rng):
    s = rng.normal(size=(40, 4)).astype(np.float32)
    write_emb(tmp_path / "s.emb", s)
    write_emb(tmp_path / "same.emb", s)
    write_emb(tmp_path / "other.emb", rng.normal(size=(40, 4)).astype(np.float32))
    manifest = {"experts": [{"expert_id": "e0", "student": "s.emb",
                             "layers": {"l0": "same.emb", "l1": "other.emb"}, "provenance": "post-mlp"}]}
    (tmp_path / "cka.json").write_text(json.dumps(manifest))
    for flag, out in (([], "a"), (["--no-clip"], "b")):
        assert run("cka", "--out", tmp_path / out, "--manifest", tmp_path / "cka.json", *flag) == 0
    rows = list(csv.reader((tmp_path / "a" / "cka.csv").open()))
    assert rows[0] == ["expert", "l0", "l1"]
    assert float(rows[1][1]) == pytest.approx(1.0, abs=1e-6) and float(rows[1][2]) < 0.5
    assert (tmp_path / "a" / "cka.csv").read_bytes() == (tmp_path / "b" / "cka.csv").read_bytes()


def test_rope_command(tmp_path):
    assert run("rope", "--out", tmp_path / "o", "--width", 1024, "--height", 256, "--num-pairs", 4) == 0
    grid = read_emb(tmp_path / "o" / "grid.emb")
    assert grid.shape == (64 * 16, 2)
    assert grid[:, 0].max() == pytest.approx(2.0) and grid[:, 1].min() == pytest.approx(-0.5)
    assert read_emb(tmp_path / "o" / "phases.emb").shape == (1024, 4)


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "kernels" in capsys.readouterr().out
