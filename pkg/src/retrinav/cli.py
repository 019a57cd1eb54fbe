"""Command-line driver.

Exit status: 0 on success, 1 for usage errors, 2 when a command fails at
run time.  Outputs are written to temporary files and renamed into place
only when the whole command succeeds.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import __version__
from .contextkit import (SelectorLogits, build_dynamic_context, build_static_context, context_dump,
                         gumbel_select)
from .embedstore import EmbeddingRecord, EmbeddingStore
from .navsim.agents import compute_metrics, write_metrics_csv
from .navsim.dataset import episode_from_json, episode_to_json, generate_dataset, sample_episodes
from .navsim.scene import Scene, cell_center, synth_scene
from .remb import load_store, write_remb
from .retrieval import CategoryTable, build_shortlist, mmr_rerank, retrieve_category, softmax_normalize
from .simgraph import MAX_DENSE_NODES, VARIANTS, SimilarityGraph, build_scene_graph, shortest_path
from .suite import (AGENTS, DEFAULT_SWEEP, SceneBundle, SuiteConfig, build_bundle, run_episode,
                    run_size_sweep, run_suite, sign_test, stream)

log = logging.getLogger("retrinav")

BENCH_SIZES = (100, 1000, 10_000, 100_000)
BENCH_COLUMNS = ("size", "stage", "median_ms", "p90_ms", "repeats")
_DUMP = 4   # random-stream purpose for context dumps
_UMASK = os.umask(0)
os.umask(_UMASK)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# helpers -------------------------------------------------------------------

def fixture_names() -> list[str]:
    root = resources.files("retrinav") / "fixtures"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_json_arg(value: str) -> dict:
    """A JSON file path, or the name of a shipped fixture."""
    path = Path(value)
    if path.exists():
        text = path.read_text(encoding="utf-8")
    else:
        res = resources.files("retrinav") / "fixtures" / f"{value}.json"
        if not res.is_file():
            raise FileNotFoundError(f"config {value!r} is neither a file nor a fixture ({fixture_names()})")
        text = res.read_text(encoding="utf-8")
    data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"config {value!r} must hold a JSON object")
    return data


def suite_config(args) -> SuiteConfig:
    data = load_json_arg(args.config) if args.config else {}
    data = {k: v for k, v in data.items() if not k.startswith("_")}
    cfg = SuiteConfig.from_json(data)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _csv_list(text: str, cast=int) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None


def _xy(text: str) -> tuple[float, float]:
    vals = _csv_list(text, float)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected x,y got {text!r}")
    return vals[0], vals[1]


class Outputs:
    """Temp-file staging: commit renames everything, abort deletes everything."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self._staged: list[tuple[Path, Path]] = []

    def path(self, name: str) -> Path:
        final = self.out_dir / name
        fd, tmp = tempfile.mkstemp(prefix=f".{final.name}.", suffix=".tmp", dir=self.out_dir)
        os.close(fd)
        os.chmod(tmp, 0o666 & ~_UMASK)
        self._staged.append((Path(tmp), final))
        return Path(tmp)

    def commit(self) -> list[Path]:
        for tmp, final in self._staged:
            os.replace(tmp, final)
        return [final for _, final in self._staged]

    def abort(self) -> None:
        for tmp, _ in self._staged:
            with contextlib.suppress(FileNotFoundError):
                tmp.unlink()


@contextlib.contextmanager
def outputs(out_dir: str | os.PathLike) -> Iterator[Outputs]:
    path = Path(out_dir)
    path.mkdir(parents=True, exist_ok=True)
    out = Outputs(path)
    try:
        yield out
    except BaseException:
        out.abort()
        raise
    for final in out.commit():
        log.info("wrote %s", final)


def _write_remb_pair(out: Outputs, name: str, records: list[EmbeddingRecord], dim: int) -> None:
    """REMB file plus JSONL sidecar, both staged."""
    main = out.path(f"{name}.remb")
    side = out.path(f"{name}.jsonl")
    write_remb(main, records, dim, sidecar=False)
    with open(side, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json()) + "\n")


# commands ------------------------------------------------------------------

def cmd_gen_scene(args) -> None:
    cfg = suite_config(args)
    scene = synth_scene(cfg.scene_spec(args.index))
    episodes = sample_episodes(scene, cfg.episodes, stream(cfg, args.index, 2))
    with outputs(args.out_dir) as out:
        scene.save(out.path("scene.json"))
        with open(out.path("episodes.json"), "w", encoding="utf-8") as fh:
            json.dump([episode_to_json(e) for e in episodes], fh)


def cmd_gen_dataset(args) -> None:
    cfg = suite_config(args)
    scene = Scene.load(args.scene)
    size = cfg.dataset_size if args.size is None else args.size
    records = generate_dataset(scene, size, stream(cfg, args.index, 1), first_frame_id=args.first_frame_id)
    with outputs(args.out_dir) as out:
        _write_remb_pair(out, args.name, records, scene.dim)


def _scene_of(store: EmbeddingStore, requested: str | None) -> str:
    scenes = store.scenes()
    if requested is not None:
        if requested not in scenes:
            raise ValueError(f"scene {requested!r} not in dataset (has {scenes})")
        return requested
    if len(scenes) != 1:
        raise ValueError(f"dataset holds scenes {scenes}; pass --scene-id")
    return scenes[0]


def cmd_build_graph(args) -> None:
    cfg = suite_config(args)
    store = load_store(args.dataset)
    scene_id = _scene_of(store, args.scene_id)
    variant = args.variant or cfg.variant
    threshold = args.threshold if args.threshold is not None else cfg.threshold
    graph = build_scene_graph(store, scene_id, variant, threshold)
    with outputs(args.out_dir) as out:
        graph.save(out.path(args.name))
    log.info("%s graph: %d nodes, %d edges", graph.variant, len(graph.nodes), graph.num_edges)


def cmd_retrieve(args) -> None:
    cfg = suite_config(args)
    store = load_store(args.dataset)
    scene_id = _scene_of(store, args.scene_id)
    if args.mode == "category":
        if not args.category:
            raise UsageError("--mode category needs --category")
        table = softmax_normalize(CategoryTable.from_store(store, scene_id))
        hits = retrieve_category(store, scene_id, table, args.category, args.k)
        col = table.categories.index(args.category)
        weight = dict(zip(table.indices.tolist(), table.normalized[:, col].tolist()))
        result = {"mode": "category", "category": args.category,
                  "results": [[store.record(i).frame_id, weight[i]] for i in hits]}
    else:
        query = _query_vector(args, store)
        if args.mode == "topk":
            hits = store.topk(scene_id, query, args.k)
            result = {"mode": "topk", "results": [[store.record(i).frame_id, s] for i, s in hits]}
        elif args.mode == "mmr":
            shortlist = build_shortlist(store, scene_id, query)
            picked = mmr_rerank(shortlist, args.k, cfg.beta)
            result = {"mode": "mmr", "beta": cfg.beta, "results": [store.record(i).frame_id for i in picked]}
        else:  # path
            if args.graph is None or args.from_frame is None:
                raise UsageError("--mode path needs --graph and --from-frame")
            graph = SimilarityGraph.load(args.graph)
            src = store.index_of(args.from_frame)
            dst = store.topk(scene_id, query, 1)[0][0]
            path = shortest_path(graph, src, dst)
            result = {"mode": "path", "found": path.found, "cost": path.cost if path.found else None,
                      "results": [store.record(i).frame_id for i in path.nodes]}
    text = json.dumps(result)
    if args.out_dir:
        with outputs(args.out_dir) as out:
            out.path("retrieval.json").write_text(text + "\n", encoding="utf-8")
    print(text)


def _query_vector(args, store: EmbeddingStore) -> np.ndarray:
    if args.query_frame is not None:
        return store.vector(store.index_of(args.query_frame))
    if args.query_pose is not None:
        if args.scene is None:
            raise UsageError("--query-pose needs --scene")
        return Scene.load(args.scene).features(args.query_pose)
    if args.query_vector is not None:
        return np.asarray(json.loads(Path(args.query_vector).read_text(encoding="utf-8")), dtype=np.float64)
    raise UsageError("give one of --query-frame, --query-pose or --query-vector")


def _agents(args, cfg: SuiteConfig) -> SuiteConfig:
    if args.agents:
        cfg = cfg.replace(agents=tuple(args.agents))
    if getattr(args, "episodes", None):
        cfg = cfg.replace(episodes=args.episodes)
    if getattr(args, "scenes", None):
        cfg = cfg.replace(scenes=args.scenes)
    return cfg


def _file_bundle(args, cfg: SuiteConfig) -> SceneBundle:
    scene = Scene.load(args.scene)
    raw = json.loads(Path(args.episodes_file).read_text(encoding="utf-8"))
    episodes = [episode_from_json(scene, e) for e in raw]
    store = load_store(args.dataset) if args.dataset else None
    if store is None:
        store = EmbeddingStore(scene.dim)
        store.add_records(generate_dataset(scene, cfg.dataset_size, stream(cfg, 0, 1)))
    graph = None
    if any(AGENTS[a][1] == "dynamic" for a in cfg.agents):
        graph = build_scene_graph(store, scene.scene_id, cfg.variant, cfg.threshold)
    return SceneBundle(0, scene, store, episodes, graph)


def cmd_simulate(args) -> None:
    cfg = _agents(args, suite_config(args))
    with outputs(args.out_dir) as out:
        traces_path = out.path("traces.jsonl")
        dump_fh = open(out.path("contexts.jsonl"), "w", encoding="utf-8") if args.dump_contexts else None
        try:
            if args.scene:
                if not args.episodes_file:
                    raise UsageError("--scene needs --episodes-file")
                bundle = _file_bundle(args, cfg)
                cfg = cfg.replace(episodes=len(bundle.episodes), scenes=1)
                per_agent = {a: [] for a in cfg.agents}
                for agent in cfg.agents:
                    for e in range(len(bundle.episodes)):
                        hook = _dump_hook(dump_fh, cfg, agent, e) if dump_fh else None
                        per_agent[agent].append(run_episode(cfg, bundle, agent, e, on_step=hook))
                traces = {a: [t] for a, t in per_agent.items()}
            elif dump_fh is not None:
                traces = _suite_with_dumps(cfg, dump_fh)
            else:
                traces = run_suite(cfg, args.jobs).traces
        finally:
            if dump_fh is not None:
                dump_fh.close()
        with open(traces_path, "w", encoding="utf-8") as fh:
            for agent in cfg.agents:
                for scene in traces[agent]:
                    for t in scene:
                        fh.write(json.dumps(t.to_json()) + "\n")
        rows = [(a, cfg.name, compute_metrics([t for s in traces[a] for t in s])) for a in cfg.agents]
        write_metrics_csv(out.path("metrics.csv"), rows)
    for agent, _, m in rows:
        print(f"{agent:<40} SR {m.SR:6.2f}  SPL {m.SPL:6.2f}  N {m.N}")


def _dump_hook(fh, cfg: SuiteConfig, agent: str, episode: int):
    rng = stream(cfg, 0, _DUMP, episode)

    def hook(step, ctx, sims):
        selected, weights = gumbel_select(SelectorLogits(tuple(float(s) for s in sims), cfg.tau), rng)
        row = json.loads(context_dump(step, ctx, selected, weights))
        row.update(agent=agent, episode=episode)
        fh.write(json.dumps(row) + "\n")
    return hook


def _suite_with_dumps(cfg: SuiteConfig, fh) -> dict:
    traces: dict[str, list] = {a: [] for a in cfg.agents}
    needs_graph = any(AGENTS[a][1] == "dynamic" for a in cfg.agents)
    for i in range(cfg.scenes):
        bundle = build_bundle(cfg, i, with_graph=needs_graph)
        for agent in cfg.agents:
            traces[agent].append([run_episode(cfg, bundle, agent, e, on_step=_dump_hook(fh, cfg, agent, e))
                                  for e in range(cfg.episodes)])
    return traces


def cmd_evaluate(args) -> None:
    cfg = _agents(args, suite_config(args))
    t0 = time.perf_counter()
    result = run_suite(cfg, args.jobs)
    rows = result.rows()
    summary: dict = {"suite": cfg.name, "config": cfg.to_json(), "agents": {}}
    for agent in cfg.agents:
        m = result.metrics(agent)
        summary["agents"][agent] = {
            "SR": m.SR, "SPL": m.SPL, "N": m.N,
            "scene_SR": [s.SR for s in result.scene_metrics(agent)],
            "scene_SPL": [s.SPL for s in result.scene_metrics(agent)],
        }
    if "context_follower" in cfg.agents and "goal_greedy" in cfg.agents:
        test = sign_test([m.SR for m in result.scene_metrics("context_follower")],
                         [m.SR for m in result.scene_metrics("goal_greedy")])
        summary["sign_test"] = {"better": "context_follower", "worse": "goal_greedy",
                                "wins": test.wins, "losses": test.losses, "ties": test.ties,
                                "p_value": test.p_value}
    if args.sweep:
        sweep_cfg = cfg.replace(agents=tuple(args.sweep_agents))
        rows += run_size_sweep(sweep_cfg, args.sweep, args.jobs)
    elapsed = time.perf_counter() - t0
    with outputs(args.out_dir) as out:
        write_metrics_csv(out.path("metrics.csv"), rows)
        with open(out.path("summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=1, sort_keys=True)
    for agent, suite, m in rows:
        print(f"{agent:<40} {suite:<24} SR {m.SR:6.2f}  SPL {m.SPL:6.2f}  N {m.N}")
    if "sign_test" in summary:
        st = summary["sign_test"]
        print(f"sign test follower > greedy: {st['wins']} wins, {st['losses']} losses, p = {st['p_value']:.4g}")
    log.info("evaluate finished in %.1f s", elapsed)


def _timed(fn, repeats: int) -> list[float]:
    out = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        out.append(1e3 * (time.perf_counter() - t))
    return out


def cmd_bench(args) -> None:
    cfg = suite_config(args)
    scene = synth_scene(cfg.scene_spec(0))
    rng = stream(cfg, 0, 1)
    biggest = max(args.sizes)
    pool = generate_dataset(scene, biggest, rng)
    qrng = np.random.default_rng([cfg.seed, 99])
    queries = [scene.features(cell_center(*scene.free_cells[i]))
               for i in qrng.integers(len(scene.free_cells), size=args.queries)]
    rows = []
    for size in args.sizes:
        batch = pool[:size]
        store = EmbeddingStore(scene.dim)
        t = time.perf_counter()
        store.add_records(batch)
        ingest_ms = 1e3 * (time.perf_counter() - t)
        sid = scene.scene_id
        rows.append((size, "ingest", ingest_ms, ingest_ms, 1))
        store.topk(sid, queries[0], 1)   # warm the compiled scan
        qi = iter(range(10**9))
        tk = _timed(lambda: store.topk(sid, queries[next(qi) % len(queries)], 8), args.queries)
        rows.append((size, "topk", *_summary(tk)))
        mm = _timed(lambda: mmr_rerank(build_shortlist(store, sid, queries[next(qi) % len(queries)]),
                                       cfg.C, cfg.beta), args.queries)
        rows.append((size, "mmr", *_summary(mm)))
        if size > MAX_DENSE_NODES:
            log.info("size %d: graph stages skipped (above %d nodes)", size, MAX_DENSE_NODES)
            continue
        t = time.perf_counter()
        graph = build_scene_graph(store, sid, cfg.variant, cfg.threshold)
        build_ms = 1e3 * (time.perf_counter() - t)
        rows.append((size, "graph_build", build_ms, build_ms, 1))
        pr = np.random.default_rng([cfg.seed, 98])
        pairs = [tuple(int(x) for x in pr.integers(size, size=2)) for _ in range(args.queries)]
        pi = iter(pairs)
        gp = _timed(lambda: shortest_path(graph, *next(pi)), args.queries)
        rows.append((size, "graph_path", *_summary(gp)))
        prev = build_static_context(store, sid, queries[0], cfg.C, cfg.beta)
        crng = np.random.default_rng([cfg.seed, 97])
        cb = _timed(lambda: build_dynamic_context(store, sid, graph, queries[next(qi) % len(queries)],
                                                  queries[0], cfg.C, prev, crng), args.queries)
        rows.append((size, "context_build", *_summary(cb)))
    with outputs(args.out_dir) as out:
        with open(out.path("bench.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(BENCH_COLUMNS)
            for size, stage, med, p90, n in rows:
                w.writerow([size, stage, f"{med:.4f}", f"{p90:.4f}", n])
    for size, stage, med, p90, n in rows:
        print(f"{size:>7} {stage:<14} median {med:9.3f} ms  p90 {p90:9.3f} ms")


def _summary(samples: Sequence[float]) -> tuple[float, float, int]:
    a = np.asarray(samples)
    return float(np.median(a)), float(np.percentile(a, 90)), len(a)


def cmd_serve(args) -> None:
    from .fleetd import serve
    serve(args.listen, args.dim, args.log)


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="suite config JSON file or shipped fixture name")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out-dir", default=".", help="directory for outputs (default: .)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (default: 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="retrinav", description="Retrieval-augmented navigation toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-scene", parents=[common], help="synthesize a scene and its episode list")
    s.add_argument("--index", type=int, default=0, help="scene index within the suite")
    s.set_defaults(func=cmd_gen_scene)

    s = sub.add_parser("gen-dataset", parents=[common], help="record a retrieval database in a scene")
    s.add_argument("--scene", required=True, help="scene JSON")
    s.add_argument("--size", type=int, help="frames to record (default: config dataset_size)")
    s.add_argument("--index", type=int, default=0, help="scene index used for the random stream")
    s.add_argument("--first-frame-id", type=int, default=0)
    s.add_argument("--name", default="dataset", help="output stem (default: dataset)")
    s.set_defaults(func=cmd_gen_dataset)

    s = sub.add_parser("build-graph", parents=[common], help="build a similarity graph over a database")
    s.add_argument("--dataset", required=True, help="REMB file")
    s.add_argument("--scene-id")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--threshold", type=float)
    s.add_argument("--name", default="graph.json")
    s.set_defaults(func=cmd_build_graph)

    s = sub.add_parser("retrieve", parents=[common], help="query a database")
    s.add_argument("--dataset", required=True)
    s.add_argument("--scene-id")
    s.add_argument("--mode", choices=("topk", "mmr", "path", "category"), default="topk")
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--query-frame", type=int)
    s.add_argument("--query-pose", type=_xy, help="x,y in metres (needs --scene)")
    s.add_argument("--query-vector", help="JSON file holding one vector")
    s.add_argument("--scene", help="scene JSON for --query-pose")
    s.add_argument("--graph", help="graph JSON for --mode path")
    s.add_argument("--from-frame", type=int, help="start frame for --mode path")
    s.add_argument("--category")
    s.set_defaults(func=cmd_retrieve, out_dir=None)

    for name, func, text in (("simulate", cmd_simulate, "roll out agents and write traces"),
                             ("evaluate", cmd_evaluate, "run a suite and write the metrics CSV")):
        s = sub.add_parser(name, parents=[common], help=text)
        s.add_argument("--agents", nargs="+", choices=sorted(AGENTS))
        s.add_argument("--episodes", type=int, help="episodes per scene")
        s.add_argument("--scenes", type=int, help="number of scenes")
        s.set_defaults(func=func)
        if name == "simulate":
            s.add_argument("--scene", help="scene JSON (with --episodes-file) instead of the suite")
            s.add_argument("--episodes-file", help="JSON list of {start, goal}")
            s.add_argument("--dataset", help="REMB database for --scene")
            s.add_argument("--dump-contexts", action="store_true",
                           help="also write per-step contexts with Gumbel selections")
        else:
            s.add_argument("--sweep", type=_csv_list, nargs="?", const=list(DEFAULT_SWEEP),
                           help="also sweep database sizes (default 100,1000,10000)")
            s.add_argument("--sweep-agents", nargs="+", choices=sorted(AGENTS),
                           default=["context_follower"])

    s = sub.add_parser("bench", parents=[common], help="per-stage latency across store sizes")
    s.add_argument("--sizes", type=_csv_list, default=list(BENCH_SIZES))
    s.add_argument("--queries", type=int, default=50)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("serve", parents=[common], help="run the fleet ingestion/query service")
    s.add_argument("--listen", default="127.0.0.1:7878", help="host:port (default 127.0.0.1:7878)")
    s.add_argument("--log", help="REMB append log (replayed on start)")
    s.add_argument("--dim", type=int, help="vector dimension when starting without a log")
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"retrinav: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, RuntimeError) as exc:
        print(f"retrinav: {args.command} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
