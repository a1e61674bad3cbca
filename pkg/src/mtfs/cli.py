"""``mtfs`` command line: key management, node lifecycle, file operations and simulation runs.

Settings resolve as flags > environment > config file > defaults.  Errors go
to stderr as one JSON object; usage errors exit 2, operational errors exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import crypto
from .errors import MtfsError, UnreachableNode
from .ledger import Ledger
from .merkle import ObjectStore, canonical_json
from .overlay import NodeInfo, RedundancyConfig
from .replication import ReplicationPolicy

DEFAULT_DATA_DIR = "~/.mtfs"
CONFIG_NAME = "mtfs.toml"


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class CliConfig:
    data_dir: Path
    identity: Path
    entry: Optional[str]
    ledger: Path
    redundancy: str = "none"
    r: int = 3

    @classmethod
    def resolve(cls, args) -> "CliConfig":
        file_vals: dict = {}
        cfg_path = Path(args.config) if args.config else None
        if cfg_path is None:
            for candidate in (Path.cwd() / CONFIG_NAME, _env_path("MTFS_DATA_DIR", DEFAULT_DATA_DIR) / CONFIG_NAME):
                if candidate.is_file():
                    cfg_path = candidate
                    break
        if cfg_path is not None:
            try:
                file_vals = tomllib.loads(cfg_path.read_text())
            except (OSError, tomllib.TOMLDecodeError) as exc:
                raise UsageError(f"cannot read config {cfg_path}: {exc}") from exc

        def pick(flag, env, key, default):
            if flag is not None:
                return flag
            if env and os.environ.get(env):
                return os.environ[env]
            return file_vals.get(key, default)

        data_dir = Path(pick(args.data_dir, "MTFS_DATA_DIR", "data_dir", DEFAULT_DATA_DIR)).expanduser()
        identity = pick(args.identity, "MTFS_IDENTITY", "identity", None)
        ledger = pick(args.ledger, None, "ledger", None)
        try:
            r = int(pick(args.replicas, None, "r", 3))
        except ValueError:
            raise UsageError("r must be an integer") from None
        return cls(
            data_dir=data_dir,
            identity=Path(identity).expanduser() if identity else data_dir / "identity.json",
            entry=pick(args.entry, "MTFS_ENTRY", "entry", None),
            ledger=Path(ledger).expanduser() if ledger else data_dir / "ledger.chain",
            redundancy=pick(args.redundancy, None, "redundancy", "none"),
            r=r,
        )


def _env_path(name: str, default: str) -> Path:
    return Path(os.environ.get(name) or default).expanduser()


def parse_addr(text: str) -> tuple:
    host, sep, port = text.rpartition(":")
    if not sep or not host:
        raise UsageError(f"address must be host:port, got {text!r}")
    try:
        return host, int(port)
    except ValueError:
        raise UsageError(f"bad port in {text!r}") from None


# ------------------------------------------------------------------ identity
def write_identity(path: Path, kp: crypto.KeyPair) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {"private_key": kp.private.to_bytes().hex(), "public_key": kp.public.hex()}
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        json.dump(record, fh)


def read_identity(path: Path) -> crypto.KeyPair:
    try:
        record = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"no identity at {path}; run 'mtfs keygen' first") from None
    except (OSError, ValueError) as exc:
        raise UsageError(f"unreadable identity {path}: {exc}") from exc
    sk = crypto.PrivateKey.from_bytes(bytes.fromhex(record["private_key"]))
    return crypto.KeyPair(sk, sk.public_key)


# ------------------------------------------------------------------- output
class Output:
    def __init__(self, as_json: bool, stream=None):
        self.as_json = as_json
        self.stream = stream or sys.stdout

    def emit(self, record: dict, human: Optional[str] = None) -> None:
        if self.as_json:
            self.stream.write(canonical_json(record).decode() + "\n")
        else:
            self.stream.write((human if human is not None else _human(record)) + "\n")


def _human(record: dict) -> str:
    return "\n".join(f"{k}: {v}" for k, v in record.items())


# ---------------------------------------------------------------- commands
def _connect(cfg: CliConfig):
    from .node import ClientEndpoint
    from .transport import TcpGateway, probe

    if not cfg.entry:
        raise UsageError("no entry node: pass --entry or set MTFS_ENTRY")
    host, port = parse_addr(cfg.entry)
    entry = probe(host, port, attempts=3)
    client_id = crypto.keygen().public.digest()
    return TcpGateway(ClientEndpoint(NodeInfo(client_id, "0.0.0.0", 0))), entry


def _session(cfg: CliConfig):
    from .workflows import UserSession

    kp = read_identity(cfg.identity)
    gateway, entry = _connect(cfg)
    return UserSession(kp, Ledger(path=cfg.ledger), gateway, entry), gateway


def cmd_keygen(args, cfg, out):
    if cfg.identity.exists() and not args.force:
        raise UsageError(f"{cfg.identity} exists; use --force to overwrite")
    kp = crypto.keygen(seed=args.seed)
    write_identity(cfg.identity, kp)
    out.emit({"identity": str(cfg.identity), "public_key": kp.public.hex(), "address": kp.public.digest()},
             kp.public.hex())


def cmd_node_start(args, cfg, out):
    from .node import StorageNode
    from .transport import NodeRuntime, listen, probe

    key_path = cfg.data_dir / "node.key"
    if key_path.exists():
        kp = read_identity(key_path)
    else:
        kp = crypto.keygen()
        write_identity(key_path, kp)
    srv = listen(args.host, args.port)
    info = NodeInfo(kp.public.digest(), args.advertise or args.host, srv.getsockname()[1])
    node = StorageNode(
        info,
        store=ObjectStore(cfg.data_dir),
        policy=ReplicationPolicy(r=cfg.r),
        redundancy=RedundancyConfig(cfg.redundancy),
    )
    rt = NodeRuntime(node, srv).start()
    if args.join:
        contact = probe(*parse_addr(args.join))
        rt.learn(contact)
        rt.call(lambda: node.start_join(contact))
        deadline = time.monotonic() + args.join_timeout
        while not node.joined and node.join_error is None and time.monotonic() < deadline:
            time.sleep(0.05)
        if not node.joined:
            rt.stop()
            raise node.join_error or UnreachableNode("join timed out")
    else:
        rt.call(lambda: node.bootstrap() or [])
        while not node.joined:
            time.sleep(0.01)
    out.emit({"node_id": info.node_id, "group_id": node.group_id, "host": info.host, "port": info.port},
             f"node {info.node_id[:16]} listening on {info.host}:{info.port} group '{node.group_id}'")
    out.stream.flush()
    try:
        if args.run_for is not None:
            time.sleep(args.run_for)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        rt.stop()


def cmd_put(args, cfg, out):
    session, gw = _session(cfg)
    try:
        data = Path(args.local).read_bytes()
        receipt = session.put_file(args.remote, data)
    finally:
        gw.close()
    out.emit({"remote": args.remote, "size": len(data), "height": receipt.height, "tx": receipt.tx_id},
             f"stored {args.remote} ({len(data)} bytes) in block {receipt.height}")


def cmd_get(args, cfg, out):
    session, gw = _session(cfg)
    try:
        data = session.get_file(args.remote)
    finally:
        gw.close()
    Path(args.local).write_bytes(data)
    out.emit({"remote": args.remote, "local": args.local, "size": len(data)}, f"wrote {len(data)} bytes to {args.local}")


def cmd_ls(args, cfg, out):
    session, gw = _session(cfg)
    try:
        rows = session.ls(args.remote or "")
    finally:
        gw.close()
    records = [{"name": r.name, "kind": r.kind, "size": r.size, "object_ref": r.object_ref} for r in rows]
    human = "\n".join(f"{r.name}\t{r.kind}\t{r.size}\t{r.object_ref}" for r in rows)
    out.emit({"entries": records}, human)


def cmd_share(args, cfg, out):
    try:
        receiver = crypto.PublicKey.from_hex(args.receiver)
    except (ValueError, MtfsError) as exc:
        raise UsageError(f"bad receiver public key: {exc}") from exc
    session, gw = _session(cfg)
    try:
        receipt = session.share_file(receiver, args.remote)
    finally:
        gw.close()
    out.emit({"remote": args.remote, "receiver": receiver.digest(), "tx": receipt.tx_id, "height": receipt.height},
             f"shared {args.remote}: tx {receipt.tx_id}")


def cmd_accept(args, cfg, out):
    session, gw = _session(cfg)
    try:
        grant = session.ledger.find(args.tx_id)
        receipt = session.accept_share(grant, name=args.name)
    finally:
        gw.close()
    out.emit({"tx": args.tx_id, "name": args.name or grant.body.name, "height": receipt.height},
             f"accepted {args.name or grant.body.name}")


def cmd_audit(args, cfg, out):
    from .overlay import Tag, parse_app
    from .workflows import run_audit

    gw, entry = _connect(cfg)
    try:
        head = parse_app(gw.request(entry, gw.client.app(Tag.STATS, {})).payload)[1]
        members = [NodeInfo.from_dict(d) for d in head["members"]]
        report = run_audit(gw, members, settle=lambda: time.sleep(args.wait))
    finally:
        gw.close()
    out.emit(report.to_dict(), f"challenged {len(report.challenged)} failures {len(report.failures)} "
             f"repairs {len(report.repairs)}")


def cmd_net_stats(args, cfg, out):
    from .workflows import network_stats

    gw, entry = _connect(cfg)
    try:
        stats = network_stats(gw, entry)
    finally:
        gw.close()
    out.emit(stats)


def _latency(text: str) -> tuple:
    kind, *vals = text.split(":")
    try:
        return (kind, *[float(v) for v in vals])
    except ValueError:
        raise UsageError(f"bad latency {text!r}") from None


def cmd_sim_run(args, cfg, out):
    from .simnet import SimConfig, run_script

    try:
        config = SimConfig(
            seed=args.seed,
            latency=_latency(args.latency),
            redundancy=RedundancyConfig(cfg.redundancy),
            k=args.k,
            policy=ReplicationPolicy(r=cfg.r),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    script = Path(args.script)
    result = run_script(config, script.read_text(), base_dir=script.parent)
    if args.trace_csv:
        Path(args.trace_csv).write_text(result.trace_csv())
    for record in result.output:
        human = {k: len(v) if k in ("challenged", "failures", "repairs") else v for k, v in record.items()}
        out.emit(record, " ".join(f"{k}={v}" for k, v in human.items()))


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="canonical JSON output")
    common.add_argument("--config", help=f"config file (default ./{CONFIG_NAME} or $MTFS_DATA_DIR/{CONFIG_NAME})")
    common.add_argument("--data-dir", help="storage root (env MTFS_DATA_DIR)")
    common.add_argument("--identity", help="identity file (env MTFS_IDENTITY)")
    common.add_argument("--entry", help="entry node host:port (env MTFS_ENTRY)")
    common.add_argument("--ledger", help="ledger chain file")
    common.add_argument("--redundancy", choices=["none", "cluster", "extra_links"])
    common.add_argument("--replicas", type=int, help="replication factor r")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mtfs", description="Encrypted private file system over a tree overlay.")
    sub = p.add_subparsers(dest="command", required=True)

    k = sub.add_parser("keygen", parents=[common], help="create an identity")
    k.add_argument("--seed", help="derive the key deterministically (testing only)")
    k.add_argument("--force", action="store_true")
    k.set_defaults(func=cmd_keygen)

    node = sub.add_parser("node", help="node lifecycle")
    nsub = node.add_subparsers(dest="node_command", required=True)
    start = nsub.add_parser("start", parents=[common], help="run a storage node")
    start.add_argument("--host", default="127.0.0.1")
    start.add_argument("--port", type=int, default=7717)
    start.add_argument("--advertise", help="host other nodes should dial")
    start.add_argument("--join", metavar="HOST:PORT", help="join via this node instead of bootstrapping")
    start.add_argument("--join-timeout", type=float, default=30.0)
    start.add_argument("--run-for", type=float, help="exit after this many seconds")
    start.set_defaults(func=cmd_node_start)

    put = sub.add_parser("put", parents=[common], help="upload a local file")
    put.add_argument("local")
    put.add_argument("remote")
    put.set_defaults(func=cmd_put)

    get = sub.add_parser("get", parents=[common], help="download a file")
    get.add_argument("remote")
    get.add_argument("local")
    get.set_defaults(func=cmd_get)

    ls = sub.add_parser("ls", parents=[common], help="list a folder")
    ls.add_argument("remote", nargs="?", default="")
    ls.set_defaults(func=cmd_ls)

    share = sub.add_parser("share", parents=[common], help="grant a file to another public key")
    share.add_argument("remote")
    share.add_argument("receiver", help="receiver public key, hex")
    share.set_defaults(func=cmd_share)

    accept = sub.add_parser("accept", parents=[common], help="accept a file grant")
    accept.add_argument("tx_id")
    accept.add_argument("--name", help="store under a different name")
    accept.set_defaults(func=cmd_accept)

    audit = sub.add_parser("audit", parents=[common], help="run one storage audit round")
    audit.add_argument("--wait", type=float, default=1.0, help="seconds to wait for proofs")
    audit.set_defaults(func=cmd_audit)

    sim = sub.add_parser("sim", help="simulation")
    ssub = sim.add_subparsers(dest="sim_command", required=True)
    run = ssub.add_parser("run", parents=[common], help="run a scenario script")
    run.add_argument("script")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--latency", default="fixed:10", help="fixed:MS or uniform:LO:HI")
    run.add_argument("--k", type=int, default=2, help="neighbor table radius")
    run.add_argument("--trace-csv", help="write broadcast traces here")
    run.set_defaults(func=cmd_sim_run)

    net = sub.add_parser("net", help="network inspection")
    netsub = net.add_subparsers(dest="net_command", required=True)
    stats = netsub.add_parser("stats", parents=[common], help="node count, height, open branches, objects")
    stats.set_defaults(func=cmd_net_stats)
    return p


def _error(kind: str, message: str) -> None:
    sys.stderr.write(canonical_json({"error": kind, "message": message}).decode() + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    out = Output(args.json)
    try:
        cfg = CliConfig.resolve(args)
        args.func(args, cfg, out)
    except UsageError as exc:
        _error("UsageError", str(exc))
        return 2
    except (MtfsError, OSError, TimeoutError) as exc:
        _error(type(exc).__name__, str(exc))
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
