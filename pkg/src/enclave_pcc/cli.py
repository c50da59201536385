"""Command-line tools: catgen, catcheck, catrun and catbench."""
from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import astuple, dataclass, fields, replace
from pathlib import Path

from . import gateway as G
from .bundle import BundleError, Mode, Policy, PolicyManifest, decode_bundle, encode_bundle
from .consumer import BootstrapEnclave, PolicyMismatch, ServiceConfig, execute
from .corpus import sample_input
from .emulator import read_schedule, run_uninstrumented
from .instrument import InstrumentError, build_bundle, parse_program
from .isa import IsaError
from .loader import LayoutConfig, LoaderError, build_layout, load
from .verifier import verify

EXIT_OK, EXIT_ERROR, EXIT_REJECTED = 0, 1, 2

GRANULARITIES = (
    ("P1", Policy.P1),
    ("P1+P2", Policy.P1 | Policy.P2),
    ("P1-P5", Policy.P1 | Policy.P2 | Policy.P3 | Policy.P4 | Policy.P5),
    ("P1-P6", Policy.P1 | Policy.P2 | Policy.P3 | Policy.P4 | Policy.P5 | Policy.P6),
)


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1 so that 2 keeps meaning "rejected by the verifier"."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _die(prog: str, msg: str) -> int:
    print(f"{prog}: {msg}", file=sys.stderr)
    return EXIT_ERROR


def _policies(text: str) -> Policy:
    try:
        return Policy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _layout(path: str | None) -> LayoutConfig:
    return LayoutConfig.from_file(path) if path else LayoutConfig()


# ---------------------------------------------------------------- catgen


def catgen(argv: list[str] | None = None) -> int:
    ap = _Parser(prog="catgen", description="Instrument assembly source and write a code+proof bundle.")
    ap.add_argument("source", help="assembly source file")
    ap.add_argument("-o", "--output", help="bundle path (default: source with .catb suffix)")
    ap.add_argument("--policies", type=_policies, default=Policy.NONE, help="comma list, e.g. p1,p2,p5")
    ap.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.CCAAS.value)
    ap.add_argument("--entry", default="main")
    ap.add_argument("--pad-length", type=int, default=256)
    ap.add_argument("--max-sends", type=int, default=None)
    ap.add_argument("--max-output-bits", type=int, default=8)
    ap.add_argument("--ssa-k", type=int, default=20)
    ap.add_argument("--aex-threshold", type=int, default=22)
    args = ap.parse_args(argv)

    src = Path(args.source)
    out = Path(args.output) if args.output else src.with_suffix(".catb")
    try:
        manifest = PolicyManifest(
            args.policies, Mode(args.mode), args.pad_length, args.max_sends,
            args.max_output_bits, args.ssa_k, args.aex_threshold,
        )
        bundle = build_bundle(src.read_text(), manifest, args.entry)
    except (OSError, BundleError, InstrumentError, IsaError) as exc:
        return _die("catgen", str(exc))
    out.write_bytes(encode_bundle(bundle))
    print(f"{out}: {len(bundle.code)} code bytes, policies {','.join(manifest.policies.names()) or 'none'}")
    return EXIT_OK


# ---------------------------------------------------------------- catcheck


def catcheck(argv: list[str] | None = None) -> int:
    ap = _Parser(prog="catcheck", description="Load and verify a bundle without running it.")
    ap.add_argument("bundle")
    ap.add_argument("--layout", help="layout ini file")
    args = ap.parse_args(argv)
    try:
        bundle = decode_bundle(Path(args.bundle).read_bytes())
        img = load(bundle, build_layout(_layout(args.layout)))
    except (OSError, BundleError, LoaderError) as exc:
        return _die("catcheck", str(exc))
    report = verify(img, bundle.manifest)
    if report.accepted:
        print(f"accepted: {len(report.coverage)} instructions, {len(report.matches)} guards")
        return EXIT_OK
    sys.stdout.write(report.to_text())
    print(f"rejected: {len(report.violations)} violation(s)")
    return EXIT_REJECTED


# ---------------------------------------------------------------- catrun


def catrun(argv: list[str] | None = None) -> int:
    ap = _Parser(
        prog="catrun",
        description="Attest a mock bootstrap enclave, upload a bundle and data over the sealed channel and run it.",
    )
    ap.add_argument("bundle")
    ap.add_argument("data", nargs="?", help="input data file (default: empty)")
    ap.add_argument("--aex-schedule", help="file with one step index per line")
    ap.add_argument("--step-limit", type=int, default=10_000_000)
    ap.add_argument("--layout", help="layout ini file")
    ap.add_argument("--message", action="append", default=[], help="host message file for ocall_recv (repeatable)")
    ap.add_argument("--require", type=_policies, default=Policy.NONE, help="policies the service insists on")
    ap.add_argument("--aex-threshold", type=int, help="service AEX threshold (default: the bundle's)")
    ap.add_argument("--ssa-k", type=int, help="service SSA stride (default: the bundle's)")
    ap.add_argument("--write-log", help="write '<step> <addr> <len>' audit lines for untrusted stores here")
    args = ap.parse_args(argv)

    try:
        raw = Path(args.bundle).read_bytes()
        bundle = decode_bundle(raw)
        data = Path(args.data).read_bytes() if args.data else b""
        messages = [Path(p).read_bytes() for p in args.message]
        schedule = read_schedule(Path(args.aex_schedule).read_text()) if args.aex_schedule else []
        layout = _layout(args.layout)
    except (OSError, ValueError, BundleError) as exc:
        return _die("catrun", str(exc))

    # the service runs in the bundle's mode with its own (possibly pinned) limits
    required = replace(bundle.manifest, policies=args.require)
    if args.aex_threshold is not None:
        required = replace(required, aex_threshold=args.aex_threshold)
    if args.ssa_k is not None:
        required = replace(required, ssa_stride_k=args.ssa_k)
    config = ServiceConfig(required, layout)
    enclave = BootstrapEnclave(config)
    client = G.Client(config.measurement())
    try:
        quote = enclave.attest(client.nonce, client.public)
        client.accept(G.Quote.from_bytes(quote.to_bytes()))
        enclave.receive_binary(client.seal_bundle(raw))
        for msg in messages:
            enclave.queue_message(client.seal_message(msg))
        enclave.receive_userdata(client.seal_data(data))
        result = enclave.execute(schedule, args.step_limit)
    except (G.GatewayError, PolicyMismatch, BundleError, LoaderError) as exc:
        return _die("catrun", str(exc))

    if not result.accepted:
        sys.stdout.write(result.report.to_text())
        print("rejected by verifier")
        return EXIT_REJECTED
    outcome = result.outcome
    if args.write_log:
        Path(args.write_log).write_text(
            "".join(f"{w.step} {w.addr:#x} {w.length}\n" for w in outcome.write_log if not w.trusted)
        )
    print(outcome.describe())
    if outcome.code is not None:
        print(f"violation code {outcome.code:#x}")
    for i, ct in enumerate(enclave.session.emitted):
        plain = client.open_output(ct)
        print(f"output {i}: {len(ct)} byte frame, {len(plain)} byte payload: {plain.hex()}")
    return outcome.exit_code


# ---------------------------------------------------------------- catbench


@dataclass
class BenchRow:
    kernel: str
    policy_set: str
    size_base: int = 0
    size_instrumented: int = 0
    size_overhead: float = 0.0
    dinsn_base: int = 0
    dinsn_instrumented: int = 0
    dinsn_overhead: float = 0.0
    status: str = "ok"


BENCH_HEADER = tuple(f.name for f in fields(BenchRow))


def _overhead(base: int, instr: int) -> float:
    return round(100.0 * (instr - base) / base, 2) if base else 0.0


def bench_kernel(name: str, source: str, step_limit: int = 10_000_000) -> list[BenchRow]:
    """One row per granularity; failures land in the ``status`` column."""
    rows = [BenchRow(name, label) for label, _ in GRANULARITIES]
    layout = build_layout()
    data = sample_input(name)
    try:
        program = parse_program(source)
        size_base = len(build_bundle(source, PolicyManifest()).code)
        ref = run_uninstrumented(program, layout, data, step_limit)
    except Exception as exc:  # one broken kernel must not stop the run
        for row in rows:
            row.status = f"error: {exc}"
        return rows
    for row, (_, policies) in zip(rows, GRANULARITIES):
        row.size_base, row.dinsn_base = size_base, ref.steps
        if ref.status.value != "Completed":
            row.status = f"baseline {ref.describe()}"
            continue
        try:
            bundle = build_bundle(source, PolicyManifest(policies))
            result = execute(bundle, data, layout, step_limit=step_limit)
        except Exception as exc:
            row.status = f"error: {exc}"
            continue
        row.size_instrumented = len(bundle.code)
        row.size_overhead = _overhead(size_base, row.size_instrumented)
        if not result.accepted:
            row.status = "rejected: " + " ".join(sorted(k.value for k in result.report.kinds()))
            continue
        out = result.outcome
        row.dinsn_instrumented = out.steps
        row.dinsn_overhead = _overhead(ref.steps, out.steps)
        if out.status.value != "Completed":
            row.status = out.describe()
        elif out.data_digest != ref.data_digest or out.outputs != ref.outputs:
            row.status = "mismatch against uninstrumented run"
    return rows


def _bench_job(job: tuple[str, str, int]) -> list[BenchRow]:
    return bench_kernel(*job)


def run_bench(kernel_dir: Path, jobs: int = 1, step_limit: int = 10_000_000) -> list[BenchRow]:
    work = [(p.stem, p.read_text(), step_limit) for p in sorted(kernel_dir.glob("*.s"))]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_bench_job, work))
    else:
        results = [_bench_job(w) for w in work]
    return [row for rows in results for row in rows]


def bench_csv(rows: list[BenchRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for row in rows:
        w.writerow(astuple(row))
    return buf.getvalue()


def bench_table(rows: list[BenchRow]) -> str:
    head = f"{'kernel':<14} {'policies':<7} {'size':>7} {'instr':>7} {'size%':>8} {'dinsn':>9} {'instr':>9} {'dinsn%':>8}  status"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r.kernel:<14} {r.policy_set:<7} {r.size_base:>7} {r.size_instrumented:>7} {r.size_overhead:>8.2f}"
            f" {r.dinsn_base:>9} {r.dinsn_instrumented:>9} {r.dinsn_overhead:>8.2f}  {r.status}"
        )
    return "\n".join(lines) + "\n"


def _default_kernels() -> Path:
    return Path(__file__).resolve().parent / "kernels"


def catbench(argv: list[str] | None = None) -> int:
    ap = _Parser(prog="catbench", description="Size and dynamic-instruction overhead per policy granularity.")
    ap.add_argument("kernel_dir", nargs="?", help="directory of .s kernels (default: the bundled corpus)")
    ap.add_argument("--csv", default="catbench.csv", help="machine-readable report path")
    ap.add_argument("-j", "--jobs", type=int, default=1)
    ap.add_argument("--step-limit", type=int, default=10_000_000)
    args = ap.parse_args(argv)

    kdir = Path(args.kernel_dir) if args.kernel_dir else _default_kernels()
    if not kdir.is_dir():
        return _die("catbench", f"{kdir} is not a directory")
    rows = run_bench(kdir, args.jobs, args.step_limit)
    sys.stdout.write(bench_table(rows))
    Path(args.csv).write_text(bench_csv(rows))
    failed = sum(r.status != "ok" for r in rows)
    if failed:
        print(f"{failed} row(s) failed", file=sys.stderr)
    return EXIT_ERROR if failed else EXIT_OK


def main() -> int:
    tools = {"catgen": catgen, "catcheck": catcheck, "catrun": catrun, "catbench": catbench}
    if len(sys.argv) < 2 or sys.argv[1] not in tools:
        print(f"usage: python -m enclave_pcc.cli {{{','.join(tools)}}} ...", file=sys.stderr)
        return EXIT_ERROR
    return tools[sys.argv[1]](sys.argv[2:])


if __name__ == "__main__":
    sys.exit(main())
