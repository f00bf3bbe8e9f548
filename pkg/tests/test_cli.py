import numpy as np
import pytest
import yaml

from hrhash.cli import main
from hrhash.data import generate_synthetic, write_manifest, write_synthetic
from hrhash.retrieval import RetrievalDatabase, load_db, read_sidecar, save_db, write_sidecar
from conftest import random_codes
from oracles import brute_force_ranking

TINY_CONFIG = {
    "data": {
        "synthetic": {"num_classes": 2, "per_class": 8, "image_size": 32, "noise_level": 0.05, "seed": 0},
        "protocol": {"name": "synthetic", "per_class": True, "train": 5, "test": 2, "val": 0},
    },
    "backbone": {"preset": "desk", "base_width": 4, "head_width": 64, "blocks_per_branch": 1},
    "head": {"code_length": 8},
    "train": {"epochs": 2, "batch_size": 4, "runs": 2, "learning_rate": 1e-3},
    "evaluation": {"map_k": 4},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY_CONFIG))
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    (root / "tiny.yaml").write_text(yaml.safe_dump(TINY_CONFIG))
    assert main(["train", "--config", str(root / "tiny.yaml"), "--out", str(root / "run")]) == 0
    samples = generate_synthetic(2, 8, 32, 0.05, seed=0)
    write_synthetic(root / "data", samples, fmt="npy")
    return root


def test_missing_config_exits_2(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.yaml")]) == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_config_exits_2_with_field(tmp_path, capsys):
    bad = dict(TINY_CONFIG, train={"epochs": 0})
    (tmp_path / "bad.yaml").write_text(yaml.safe_dump(bad))
    assert main(["train", "--config", str(tmp_path / "bad.yaml")]) == 2
    assert "train" in capsys.readouterr().err
    assert main(["train", "--config", str(tmp_path / "bad.yaml"), "--override", "train.epochs=1", "--override", "x"]) == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as e:
        main(["fly"])
    assert e.value.code == 2


def test_train_outputs(trained):
    run = trained / "run"
    for name in ("split.json", "config.json", "run0.hhckpt", "run1.hhckpt", "run0.log.jsonl", "run1.timing.jsonl"):
        assert (run / name).exists()


def test_train_twice_identical_logs(trained, config, tmp_path):
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "again")]) == 0
    for r in (0, 1):
        name = f"run{r}.log.jsonl"
        assert (tmp_path / "again" / name).read_bytes() == (trained / "run" / name).read_bytes()
        assert (tmp_path / "again" / f"run{r}.hhckpt").read_bytes() == (trained / "run" / f"run{r}.hhckpt").read_bytes()


def test_output_root_env(config, tmp_path, monkeypatch):
    monkeypatch.setenv("HRHASH_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--config", str(config), "--override", "train.runs=1", "--override", "train.epochs=1"]) == 0
    assert (tmp_path / "root" / "runs" / "run0.hhckpt").exists()


def encode(trained, out, *extra):
    return main(["encode", "--checkpoint", str(trained / "run" / "run0.hhckpt"),
                 "--manifest", str(trained / "data" / "manifest.tsv"), "--out", str(out), *extra])


def test_encode(trained, tmp_path):
    assert encode(trained, tmp_path / "a.hhdb") == 0
    assert encode(trained, tmp_path / "b.hhdb") == 0
    assert (tmp_path / "a.hhdb").read_bytes() == (tmp_path / "b.hhdb").read_bytes()
    db = load_db(tmp_path / "a.hhdb")
    assert db.n == 16 and db.k == 8
    meta = read_sidecar(tmp_path / "a.hhdb")
    assert meta["bits"] == 8 and len(meta["config_hash"]) == 16


def test_encode_subset(trained, tmp_path):
    split = str(trained / "run" / "split.json")
    assert encode(trained, tmp_path / "q.hhdb", "--split", split, "--subset", "test") == 0
    assert encode(trained, tmp_path / "d.hhdb", "--split", split, "--subset", "database") == 0
    assert encode(trained, tmp_path / "t.hhdb", "--split", split, "--subset", "database", "--include-train-in-db") == 0
    assert (load_db(tmp_path / "q.hhdb").n, load_db(tmp_path / "d.hhdb").n, load_db(tmp_path / "t.hhdb").n) == (4, 2, 12)
    assert encode(trained, tmp_path / "x.hhdb", "--split", split, "--subset", "bogus") == 2


def test_encode_empty_manifest(trained, tmp_path):
    write_manifest(tmp_path / "empty.tsv", [])
    rc = main(["encode", "--checkpoint", str(trained / "run" / "run0.hhckpt"),
               "--manifest", str(tmp_path / "empty.tsv"), "--out", str(tmp_path / "e.hhdb")])
    assert rc == 0 and load_db(tmp_path / "e.hhdb").n == 0


def test_encode_code_length_mismatch(trained, tmp_path):
    assert encode(trained, tmp_path / "a.hhdb", "--code-length", "16") == 2
    assert encode(trained, tmp_path / "a.hhdb", "--code-length", "8") == 0


def write_db(path, bits, labels, ids=None, meta=None):
    save_db(RetrievalDatabase.from_bits(np.asarray(bits), labels, ids), path)
    if meta is not None:
        write_sidecar(path, meta)


def retrieve(capsys, db, q, top_k):
    rc = main(["retrieve", "--db", str(db), "--queries", str(q), "--top-k", str(top_k)])
    return rc, [tuple(int(x) for x in line.split("\t")) for line in capsys.readouterr().out.splitlines()]


def test_retrieve(tmp_path, capsys, rng):
    bits = random_codes(rng, 30, 16)
    ids = rng.permutation(100)[:30]
    write_db(tmp_path / "db.hhdb", bits, [{0}] * 30, ids)
    write_db(tmp_path / "q.hhdb", bits[:4], [{0}] * 4, [900, 901, 902, 903])
    rc, lines = retrieve(capsys, tmp_path / "db.hhdb", tmp_path / "q.hhdb", 1)
    assert rc == 0 and len(lines) == 4 and all(d == 0 for _, _, _, d in lines)
    rc, lines = retrieve(capsys, tmp_path / "db.hhdb", tmp_path / "q.hhdb", 12)
    for qi, qid in enumerate([900, 901, 902, 903]):
        got = [(d, did) for q, _, did, d in lines if q == qid]
        want = [(d, i) for d, i, _ in brute_force_ranking(bits, ids, bits[qi], 12)]
        assert got == want
    assert [r for q, r, _, _ in lines if q == 900] == list(range(1, 13))


def test_retrieve_k_mismatch(tmp_path, capsys):
    write_db(tmp_path / "a.hhdb", np.ones((2, 8)), [{0}] * 2)
    write_db(tmp_path / "b.hhdb", np.ones((2, 16)), [{0}] * 2)
    assert retrieve(capsys, tmp_path / "a.hhdb", tmp_path / "b.hhdb", 1)[0] == 2
    assert main(["evaluate", "--db", str(tmp_path / "a.hhdb"), "--queries", str(tmp_path / "b.hhdb")]) == 2


def test_corrupt_db_exits_1(tmp_path):
    (tmp_path / "bad.hhdb").write_bytes(b"HHDB\x01\x00")
    write_db(tmp_path / "ok.hhdb", np.ones((1, 8)), [{0}])
    assert main(["retrieve", "--db", str(tmp_path / "bad.hhdb"), "--queries", str(tmp_path / "ok.hhdb")]) == 1


def evaluate_cli(capsys, db, q, k, *extra):
    rc = main(["evaluate", "--db", str(db), "--queries", str(q), "--map-k", str(k), *extra])
    out = capsys.readouterr().out
    value = float(out.split("= ")[-1].split()[0]) if rc == 0 else None
    return rc, value


def test_evaluate_self_retrieval(tmp_path, capsys, rng):
    labels = [{int(c)} for c in rng.integers(0, 4, size=20)]
    write_db(tmp_path / "db.hhdb", random_codes(rng, 20, 32), labels)
    assert evaluate_cli(capsys, tmp_path / "db.hhdb", tmp_path / "db.hhdb", 1) == (0, 1.0)
    rc, v = evaluate_cli(capsys, tmp_path / "db.hhdb", tmp_path / "db.hhdb", 1, "--exclude-self")
    assert rc == 0 and v < 1.0


def test_evaluate_hand_fixture(tmp_path, capsys):
    write_db(tmp_path / "db.hhdb", [[1, 1, 1], [1, 1, -1], [1, -1, -1], [-1, -1, -1]], [{0}, {1}, {0}, {1}])
    write_db(tmp_path / "q.hhdb", [[1, 1, 1], [1, 1, 1], [-1, -1, -1], [1, 1, -1], [-1, 1, 1]],
             [{0}, {1}, {1}, {2}, {0, 1}])
    # per-query AP worked out by hand: 5/6, 1/2, 5/6, 0, 1
    want = (5 / 6 + 1 / 2 + 5 / 6 + 0 + 1) / 5
    rc, v = evaluate_cli(capsys, tmp_path / "db.hhdb", tmp_path / "q.hhdb", 4, "--report", str(tmp_path / "rep" / "r"))
    assert rc == 0 and v == pytest.approx(want, abs=1e-6)
    assert (tmp_path / "rep" / "r.txt").exists() and (tmp_path / "rep" / "r.jsonl").exists()
    # k beyond n ranks every entry
    assert evaluate_cli(capsys, tmp_path / "db.hhdb", tmp_path / "q.hhdb", 100)[1] == pytest.approx(want, abs=1e-6)


def test_evaluate_empty_queries(tmp_path, capsys):
    write_db(tmp_path / "db.hhdb", np.ones((2, 8)), [{0}] * 2)
    save_db(RetrievalDatabase.empty(8), tmp_path / "q.hhdb")
    assert evaluate_cli(capsys, tmp_path / "db.hhdb", tmp_path / "q.hhdb", 5)[0] == 2


def test_evaluate_checks_config_hash(tmp_path, capsys):
    write_db(tmp_path / "db.hhdb", np.ones((2, 8)), [{0}] * 2, meta={"config_hash": "aaaa"})
    write_db(tmp_path / "q.hhdb", np.ones((2, 8)), [{0}] * 2, meta={"config_hash": "bbbb"})
    assert evaluate_cli(capsys, tmp_path / "db.hhdb", tmp_path / "q.hhdb", 5)[0] == 2
    write_sidecar(tmp_path / "q.hhdb", {"config_hash": "aaaa"})
    assert evaluate_cli(capsys, tmp_path / "db.hhdb", tmp_path / "q.hhdb", 5) == (0, 1.0)


def test_full_pipeline_through_cli(trained, tmp_path, capsys):
    split = str(trained / "run" / "split.json")
    assert encode(trained, tmp_path / "q.hhdb", "--split", split, "--subset", "test") == 0
    assert encode(trained, tmp_path / "d.hhdb", "--split", split, "--subset", "database", "--include-train-in-db") == 0
    capsys.readouterr()
    rc, v = evaluate_cli(capsys, tmp_path / "d.hhdb", tmp_path / "q.hhdb", 4, "--report", str(tmp_path / "r"))
    assert rc == 0 and 0.0 <= v <= 1.0
    assert '"dataset": "synthetic"' in (tmp_path / "r.jsonl").read_text()


def test_synth_and_split(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "s"), "--num-classes", "10", "--per-class", "700",
                 "--image-size", "4", "--format", "npy"]) == 0
    assert main(["split", "--manifest", str(tmp_path / "s" / "manifest.tsv"), "--protocol", "cifar10",
                 "--out", str(tmp_path / "split.json")]) == 0
    assert "train 5000, test 1000, val 1000, database 0" in capsys.readouterr().out
    assert main(["split", "--manifest", str(tmp_path / "s" / "manifest.tsv"), "--protocol", "imagenet",
                 "--out", str(tmp_path / "x.json")]) == 2
    assert main(["split", "--manifest", str(tmp_path / "s" / "manifest.tsv"), "--protocol", "nope",
                 "--out", str(tmp_path / "x.json")]) == 2


def test_bench(config, tmp_path, capsys):
    assert main(["bench", "--config", str(config), "--out", str(tmp_path / "b")]) == 0
    out = capsys.readouterr().out
    assert "DPSH (W4)" in out
    assert len((tmp_path / "b" / "report.jsonl").read_text().splitlines()) == 2
