import json
import os
import subprocess
import sys

import pytest

from mtfs import cli, crypto


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(autouse=True)
def isolated(tmp_path, monkeypatch):
    for var in ("MTFS_DATA_DIR", "MTFS_ENTRY", "MTFS_IDENTITY"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.chdir(tmp_path)


def test_keygen_and_overwrite_guard(capsys, tmp_path):
    d = str(tmp_path / "d")
    code, out, _ = run(capsys, "keygen", "--data-dir", d, "--seed", "x", "--json")
    assert code == 0
    rec = json.loads(out)
    pk = crypto.PublicKey.from_hex(rec["public_key"])
    assert pk.digest() == rec["address"]
    assert oct((tmp_path / "d" / "identity.json").stat().st_mode & 0o777) == "0o600"
    code, _, err = run(capsys, "keygen", "--data-dir", d)
    assert code == 2 and json.loads(err)["error"] == "UsageError"
    code, out2, _ = run(capsys, "keygen", "--data-dir", d, "--seed", "x", "--force", "--json")
    assert code == 0 and json.loads(out2)["public_key"] == rec["public_key"]


def test_argparse_usage_exit_two(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_missing_entry_and_identity(capsys, tmp_path):
    code, _, err = run(capsys, "ls", "--data-dir", str(tmp_path))
    assert code == 2 and "identity" in json.loads(err)["message"]
    run(capsys, "keygen", "--data-dir", str(tmp_path))
    code, _, err = run(capsys, "ls", "--data-dir", str(tmp_path))
    assert code == 2 and "entry" in json.loads(err)["message"]
    code, _, err = run(capsys, "share", "/a", "nothex", "--data-dir", str(tmp_path))
    assert code == 2


def test_unreachable_entry_is_operational(capsys, tmp_path):
    run(capsys, "keygen", "--data-dir", str(tmp_path))
    srv = cli_listen_free_port()
    code, _, err = run(capsys, "ls", "--data-dir", str(tmp_path), "--entry", f"127.0.0.1:{srv}")
    assert code == 1 and json.loads(err)["error"] == "ConnectionRefused"


def cli_listen_free_port():
    from mtfs.transport import listen

    s = listen("127.0.0.1", 0)
    port = s.getsockname()[1]
    s.close()
    return port


def test_config_precedence(tmp_path, monkeypatch):
    parser = cli.build_parser()
    (tmp_path / "mtfs.toml").write_text('data_dir = "from-file"\nentry = "file:1"\nr = 2\n')
    cfg = cli.CliConfig.resolve(parser.parse_args(["ls"]))
    assert cfg.data_dir.name == "from-file" and cfg.entry == "file:1" and cfg.r == 2
    monkeypatch.setenv("MTFS_ENTRY", "env:2")
    monkeypatch.setenv("MTFS_DATA_DIR", str(tmp_path / "from-env"))
    cfg = cli.CliConfig.resolve(parser.parse_args(["ls"]))
    assert cfg.entry == "env:2" and cfg.data_dir.name == "from-env"
    assert cfg.identity == tmp_path / "from-env" / "identity.json"
    cfg = cli.CliConfig.resolve(parser.parse_args(["ls", "--entry", "flag:3", "--data-dir", "flagdir"]))
    assert cfg.entry == "flag:3" and cfg.data_dir.name == "flagdir"


def test_bad_config_file(capsys, tmp_path):
    (tmp_path / "bad.toml").write_text("this is = = not toml")
    code, _, err = run(capsys, "ls", "--config", str(tmp_path / "bad.toml"))
    assert code == 2


def test_sim_run(capsys, tmp_path):
    script = tmp_path / "s.txt"
    (tmp_path / "in.bin").write_bytes(bytes(range(256)) * 300)
    script.write_text("join 7\nbroadcast from 3\nmetrics\nuser a\nput a /f text hi\nput a /g file in.bin\n"
                      "get a /g to out.bin\nls a\n")
    csv = tmp_path / "t.csv"
    code, out, _ = run(capsys, "sim", "run", str(script), "--seed", "2", "--json", "--trace-csv", str(csv))
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()]
    assert records[0]["step"] == "metrics" and records[0]["messages_sent"] == 6
    assert records[-1]["entries"][0][:3] == ["f", "file", 2]
    assert (tmp_path / "out.bin").read_bytes() == (tmp_path / "in.bin").read_bytes()
    put_g, get_g = records[3], records[4]
    assert put_g["sha256"] == get_g["sha256"]
    assert len(csv.read_text().splitlines()) == 8
    code, _, _ = run(capsys, "sim", "run", str(script), "--latency", "uniform:9:1")
    assert code == 2
    script.write_text("join 2\nexplode\n")
    code, _, err = run(capsys, "sim", "run", str(script))
    assert code == 1 and json.loads(err)["error"] == "ScenarioError"


def _spawn_node(data_dir, *extra):
    cmd = [sys.executable, "-m", "mtfs.cli", "node", "start", "--port", "0", "--json", "--data-dir", str(data_dir), *extra]
    proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    if not line:
        proc.kill()
        raise AssertionError(proc.stderr.read())
    return proc, json.loads(line)


def test_node_processes_end_to_end(tmp_path):
    procs = []
    try:
        root, info = _spawn_node(tmp_path / "n0", "--run-for", "60")
        procs.append(root)
        entry = f"127.0.0.1:{info['port']}"
        for i in (1, 2):
            p, child = _spawn_node(tmp_path / f"n{i}", "--join", entry, "--run-for", "60")
            procs.append(p)
            assert child["group_id"] in ("0", "1")
        env = {**os.environ, "MTFS_ENTRY": entry, "MTFS_DATA_DIR": str(tmp_path / "user")}

        def mtfs(*argv):
            return subprocess.run([sys.executable, "-m", "mtfs.cli", *argv, "--json"], env=env,
                                  capture_output=True, text=True, timeout=60)

        assert mtfs("keygen").returncode == 0
        empty = mtfs("ls")
        assert empty.returncode == 0 and json.loads(empty.stdout) == {"entries": []}
        src = tmp_path / "payload.bin"
        src.write_bytes(os.urandom(20000))
        assert mtfs("put", str(src), "/p.bin").returncode == 0
        dst = tmp_path / "back.bin"
        assert mtfs("get", "/p.bin", str(dst)).returncode == 0
        assert dst.read_bytes() == src.read_bytes()
        stats = json.loads(mtfs("net", "stats").stdout)
        assert stats["nodes"] == 3 and stats["height"] == 1
        missing = mtfs("get", "/nope", str(dst))
        assert missing.returncode == 1 and json.loads(missing.stderr)["error"] == "NotFound"
    finally:
        for p in procs:
            p.kill()
            p.wait()
