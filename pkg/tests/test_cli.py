import json
from pathlib import Path

import numpy as np
import pytest

from gemret.cli import main, parse_config, whitening_pairs
from gemret.mining import MiningConfig, load_graph
from gemret.retrieval import DescriptorIndex, load_index, multiscale_descriptor, save_index
from gemret.synth import load_images
from gemret.trainer import load_checkpoint
from gemret.whitening import learn_lw, load_whitening

SMALL = """\
# tiny desk-scale run
clusters = 5
images_min = 5
images_max = 5
image_size = 16
maps = 4,6
optimizer = adam
lr = 0.01
epochs = {epochs}
batch_tuples = 2
query_budget = 2
negatives_per_tuple = 2
pool_size = 10
extra_negative_candidates_per_model = 2
train_clusters = 0,1,2,3
val_clusters = 4
max_side = 0
scales = 1, 0.7071
"""


def tree_bytes(root):
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


@pytest.fixture()
def conf(tmp_path):
    def make(epochs=1):
        path = tmp_path / f"c{epochs}.conf"
        path.write_text(SMALL.format(epochs=epochs))
        return str(path)
    return make


@pytest.fixture()
def data(tmp_path, conf):
    out = tmp_path / "data"
    assert main(["--seed", "2", "--config", conf(), "synth", str(out)]) == 0
    return out


def test_synth_deterministic(tmp_path, conf):
    for d in ("a", "b"):
        assert main(["--seed", "4", "--config", conf(), "synth", str(tmp_path / d)]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "graph.json" in a and "manifest.json" in a
    assert len([k for k in a if k.endswith(".ppm")]) == 25
    main(["--seed", "5", "--config", conf(), "synth", str(tmp_path / "c")])
    assert tree_bytes(tmp_path / "c") != a


def test_synth_structure(data):
    g = load_graph(data / "graph.json")
    assert len(g.clusters) == 5
    for c, members in g.clusters.items():
        for i in members:
            for p in g._obs[i]:
                assert g.points[p][0] // 3 == c  # points live on their cluster's plane
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["ground_truth"]["0"] == [1, 2, 3, 4]


def test_train_deterministic_and_zero_epochs(tmp_path, data, conf):
    outs = []
    for name in ("a", "b"):
        ck = tmp_path / f"{name}.gemm"
        assert main(["--seed", "1", "--config", conf(1), "train", str(data / "graph.json"),
                     str(ck)]) == 0
        outs.append((ck.read_bytes(), Path(str(ck) + ".json").read_bytes()))
    assert outs[0] == outs[1]
    report = json.loads(outs[0][1])
    assert len(report["val_score"]) == 2 and report["val_clusters"] == [4]
    ck0 = tmp_path / "zero.gemm"
    assert main(["--seed", "1", "--config", conf(0), "train", str(data / "graph.json"),
                 str(ck0)]) == 0
    net, _ = load_checkpoint(ck0)
    from gemret.backbone import TinyFCN
    init = TinyFCN.init(3, (4, 6), seed=1)
    np.testing.assert_allclose(net.layers[1].weight, init.layers[1].weight, rtol=1e-7)


def test_missing_inputs_report_path(tmp_path, capsys, conf):
    missing = tmp_path / "nope" / "graph.json"
    assert main(["train", str(missing), str(tmp_path / "x.gemm")]) != 0
    assert str(missing) in capsys.readouterr().err
    assert main(["index", str(tmp_path / "none.gemm"), "m.json", "o.gemi"]) != 0
    assert "none.gemm" in capsys.readouterr().err


def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.conf"
    bad.write_text("epochs = 3\n\nepoch = 4\n")
    assert main(["--config", str(bad), "synth", str(tmp_path / "o")]) == 1
    assert f"{bad}:3" in capsys.readouterr().err
    bad.write_text("epochs = three\n")
    with pytest.raises(ValueError, match=":1"):
        parse_config(bad)
    bad.write_text("just words\n")
    with pytest.raises(ValueError, match="key = value"):
        parse_config(bad)


def test_whiten_index_eval_pipeline(tmp_path, data, conf, capsys):
    c = conf(0)
    ck = tmp_path / "m.gemm"
    assert main(["--config", c, "train", str(data / "graph.json"), str(ck)]) == 0
    w = tmp_path / "w.gemw"
    assert main(["--config", c, "whiten", str(ck), str(data / "graph.json"), "6", str(w)]) == 0
    t = load_whitening(w)
    assert t.projection.shape == (6, 6)

    # same transform computed in-process
    net, pcfg = load_checkpoint(ck)
    g = load_graph(data / "graph.json")
    images = load_images(g, data)
    descs = {i: multiscale_descriptor(net, pcfg, images[i], [1, 0.7071], 0) for i in images}
    ref = learn_lw(whitening_pairs(g, descs, MiningConfig(pool_size=10)), 6)
    np.testing.assert_allclose(t.projection, ref.projection, rtol=1e-4, atol=1e-4)

    assert main(["--config", c, "whiten", str(ck), str(data / "graph.json"), "3",
                 str(tmp_path / "p.gemw"), "--pcaw"]) == 0
    assert load_whitening(tmp_path / "p.gemw").out_dim == 3

    idx = tmp_path / "i.gemi"
    assert main(["--config", c, "--threads", "2", "index", str(ck), str(data / "manifest.json"),
                 str(idx), "--whitening", str(w)]) == 0
    assert len(load_index(idx)) == 25 and load_index(idx).dim == 6

    capsys.readouterr()
    ranked = tmp_path / "r.txt"
    assert main(["eval", str(idx), str(data / "manifest.json"), "--alpha-qe", "0", "50",
                 "--ranked-out", str(ranked)]) == 0
    a = capsys.readouterr().out
    assert main(["eval", str(idx), str(data / "manifest.json"), "--aqe", "50"]) == 0
    b = capsys.readouterr().out
    assert a.splitlines()[-1] == b.splitlines()[-1] and a.splitlines()[-1].startswith("mAP ")
    assert main(["eval", str(idx), str(data / "manifest.json")]) == 0
    lines = ranked.read_text().splitlines()
    assert len(lines) == 25 * 24
    q, i, r, s = lines[0].split()
    assert (q, r) == ("0", "1") and len(s.split(".")[1]) == 6


def test_whiten_single_cluster_fails(tmp_path, capsys):
    cf = tmp_path / "one.conf"
    cf.write_text(SMALL.format(epochs=0).replace("clusters = 5", "clusters = 1")
                  .replace("train_clusters = 0,1,2,3\nval_clusters = 4\n", ""))
    assert main(["--config", str(cf), "synth", str(tmp_path / "d")]) == 0
    from gemret.backbone import TinyFCN
    from gemret.pooling import PoolingConfig
    from gemret.trainer import save_checkpoint
    save_checkpoint(tmp_path / "m.gemm", TinyFCN.init(3, (4, 6), seed=0), PoolingConfig.gem())
    assert main(["--config", str(cf), "whiten", str(tmp_path / "m.gemm"),
                 str(tmp_path / "d" / "graph.json"), "4", str(tmp_path / "w.gemw")]) == 1
    assert "non-matching" in capsys.readouterr().err


def test_index_empty_and_duplicates(tmp_path, data, conf):
    ck = tmp_path / "m.gemm"
    main(["--config", conf(0), "train", str(data / "graph.json"), str(ck)])
    empty = tmp_path / "empty.json"
    empty.write_text(json.dumps({"root": str(data), "entries": []}))
    assert main(["--config", conf(0), "index", str(ck), str(empty), str(tmp_path / "e.gemi")]) == 0
    assert len(load_index(tmp_path / "e.gemi")) == 0
    dup = tmp_path / "dup.json"
    dup.write_text(json.dumps({"root": str(data), "entries": [
        {"id": 0, "file": "images/00000.ppm"}, {"id": 7, "file": "images/00000.ppm"},
        {"id": 8, "file": "images/00000.ppm", "crop": [2, 2, 12, 12]}]}))
    assert main(["--config", conf(0), "index", str(ck), str(dup), str(tmp_path / "d.gemi")]) == 0
    idx = load_index(tmp_path / "d.gemi")
    assert idx.ids.tolist() == [0, 7, 8]
    np.testing.assert_array_equal(idx.vectors[0], idx.vectors[1])
    assert not np.array_equal(idx.vectors[0], idx.vectors[2])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"root": str(data), "entries": [
        {"id": 3, "file": "images/00000.ppm", "crop": [10, 10, 20, 20]}]}))
    assert main(["--config", conf(0), "index", str(ck), str(bad), str(tmp_path / "b.gemi")]) == 1


def test_eval_separable_oracle(tmp_path, capsys):
    ids = list(range(12))
    vecs = [np.eye(3)[i // 4] for i in ids]
    save_index(DescriptorIndex(ids, vecs), tmp_path / "o.gemi")
    gt = {str(i): [j for j in ids if j // 4 == i // 4 and j != i] for i in ids}
    (tmp_path / "m.json").write_text(json.dumps({"queries": ids, "ground_truth": gt}))
    assert main(["eval", str(tmp_path / "o.gemi"), str(tmp_path / "m.json")]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "mAP 1.000000"
    del gt["5"]
    (tmp_path / "m.json").write_text(json.dumps({"queries": ids, "ground_truth": gt}))
    assert main(["eval", str(tmp_path / "o.gemi"), str(tmp_path / "m.json")]) == 1
    assert "query 5" in capsys.readouterr().err


def test_gradcheck_command(capsys):
    assert main(["--seed", "3", "gradcheck", "--instances", "3"]) == 0
    first = capsys.readouterr().out
    assert first.count("PASS") == 5
    assert main(["--seed", "3", "gradcheck", "--instances", "3"]) == 0
    assert capsys.readouterr().out == first
    assert main(["gradcheck", "--instances", "3", "--corrupt", "pooling_p"]) == 1
    out = capsys.readouterr().out
    assert "pooling_p" in out and "FAIL" in out


def test_file_formats_rewrite_identically(tmp_path, data):
    from gemret.backbone import load_precomputed, save_tensor
    from gemret.imageio import read_pnm, write_pnm
    from gemret.mining import save_graph
    from gemret.whitening import WhiteningTransform, save_whitening
    rng = np.random.default_rng(0)
    cases = [
        (lambda p: save_tensor(p, rng.uniform(0, 2, (3, 4, 5))),
         lambda a, b: save_tensor(b, load_precomputed(a))),
        (lambda p: save_whitening(WhiteningTransform(rng.normal(size=4),
                                                     rng.normal(size=(4, 2))), p),
         lambda a, b: save_whitening(load_whitening(a), b)),
        (lambda p: save_index(DescriptorIndex([3, 9], rng.normal(size=(2, 4))), p),
         lambda a, b: save_index(load_index(a), b)),
        (lambda p: save_graph(load_graph(data / "graph.json"), p),
         lambda a, b: save_graph(load_graph(a), b)),
        (lambda p: write_pnm(p, rng.uniform(size=(5, 6, 3))),
         lambda a, b: write_pnm(b, read_pnm(a))),
    ]
    for n, (write, rewrite) in enumerate(cases):
        a, b = tmp_path / f"{n}.a", tmp_path / f"{n}.b"
        write(a)
        rewrite(a, b)
        assert a.read_bytes() == b.read_bytes(), n
