"""The bootstrap enclave: admits a bundle and data, verifies, rewrites and runs."""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, replace
from typing import BinaryIO, Iterable

from . import gateway as G
from .bundle import CodeProofBundle, PolicyManifest
from .emulator import ExecutionOutcome, run
from .loader import EnclaveLayout, LayoutConfig, LoadedImage, build_layout, load, rewrite_immediates
from .verifier import VerificationReport, verify

BUILD_ID = "enclave-pcc-bootstrap-0.1"


class PolicyMismatch(Exception):
    pass


class NoSession(Exception):
    pass


@dataclass(frozen=True)
class ServiceConfig:
    """What the consumer enforces; part of the attested measurement."""

    required: PolicyManifest = field(default_factory=PolicyManifest)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    build_id: str = BUILD_ID

    def measurement(self) -> G.Measurement:
        return G.Measurement.compute(self.build_id, self.layout.to_text(), self.required)


@dataclass
class PipelineResult:
    report: VerificationReport
    image: LoadedImage
    outcome: ExecutionOutcome | None = None

    @property
    def accepted(self) -> bool:
        return self.report.accepted


def effective_manifest(bundle: PolicyManifest, required: PolicyManifest) -> PolicyManifest:
    """Bundle policies checked against the consumer's own parameters."""
    missing = required.policies & ~bundle.policies
    if missing:
        raise PolicyMismatch(f"bundle lacks required policies {missing.names()}")
    if bundle.mode is not required.mode:
        raise PolicyMismatch(f"bundle built for {bundle.mode.value}, service runs {required.mode.value}")
    return replace(required, policies=bundle.policies)


def admit(
    bundle: CodeProofBundle,
    layout: EnclaveLayout,
    required: PolicyManifest | None = None,
) -> tuple[LoadedImage, VerificationReport]:
    """Load, relocate and verify; rewrites placeholders only when verification accepts."""
    manifest = effective_manifest(bundle.manifest, required or bundle.manifest)
    img = load(bundle, layout)
    report = verify(img, manifest)
    if report.accepted:
        img = rewrite_immediates(img, report)
    return img, report


def execute(
    bundle: CodeProofBundle,
    data: bytes = b"",
    layout: EnclaveLayout | None = None,
    required: PolicyManifest | None = None,
    aex_schedule: Iterable[int] = (),
    step_limit: int = 10_000_000,
    channel=None,
) -> PipelineResult:
    """Load, verify, rewrite and run without the attestation layer."""
    layout = layout or build_layout()
    img, report = admit(bundle, layout, required)
    result = PipelineResult(report, img)
    if report.accepted:
        result.outcome = run(img, data, aex_schedule, step_limit, channel, report)
    return result


class BootstrapEnclave:
    def __init__(self, config: ServiceConfig | None = None):
        self.config = config or ServiceConfig()
        self.layout = build_layout(self.config.layout)
        self.measurement = self.config.measurement()
        self.attestation = G.AttestationService(self.measurement)
        self.session: G.Session | None = None
        self.bundle: CodeProofBundle | None = None
        self.data: bytes = b""

    def attest(self, nonce: bytes, client_public: bytes) -> G.Quote:
        quote, key = self.attestation.attest(nonce, client_public)
        self.session = G.Session.for_manifest(key, self.config.required)
        self.bundle, self.data = None, b""
        return quote

    def _session(self) -> G.Session:
        if self.session is None:
            raise NoSession("attest first")
        return self.session

    def receive_binary(self, ciphertext: bytes) -> CodeProofBundle:
        bundle = G.ecall_receive_binary(ciphertext, self._session())
        effective_manifest(bundle.manifest, self.config.required)
        self.bundle = bundle
        return bundle

    def receive_userdata(self, ciphertext: bytes) -> bytes:
        capacity = self.layout.data.size // 2
        self.data = G.ecall_receive_userdata(ciphertext, self._session(), capacity)
        return self.data

    def queue_message(self, ciphertext: bytes) -> None:
        self._session().recv_queue.append(ciphertext)

    def execute(self, aex_schedule: Iterable[int] = (), step_limit: int = 10_000_000) -> PipelineResult:
        if self.bundle is None:
            raise NoSession("no bundle received")
        return execute(
            self.bundle, self.data, self.layout, self.config.required,
            aex_schedule, step_limit, self._session(),
        )


def serve(enclave: BootstrapEnclave, stdin: BinaryIO, stdout: BinaryIO, step_limit: int = 10_000_000) -> int:
    """Host loop over length-prefixed frames.

    The client sends a quote request (nonce + X25519 public key), the sealed
    bundle, any number of sealed recv messages and finally the sealed data,
    which starts execution. Every ocall_send is forwarded as a send frame.
    Returns the outcome exit code (2 when verification rejects).
    """
    while True:
        frame = G.read_frame(stdin)
        if frame is None:
            return 1
        kind, payload = frame
        if kind == G.FRAME_QUOTE:
            nonce, pub = payload[:G.NONCE_SIZE], payload[G.NONCE_SIZE:]
            G.write_frame(stdout, G.FRAME_QUOTE, enclave.attest(nonce, pub).to_bytes())
        elif kind == G.FRAME_CODE:
            enclave.receive_binary(payload)
        elif kind == G.FRAME_RECV:
            enclave.queue_message(payload)
        elif kind == G.FRAME_DATA:
            enclave.receive_userdata(payload)
            result = enclave.execute(step_limit=step_limit)
            for ct in enclave.session.emitted:
                G.write_frame(stdout, G.FRAME_SEND, ct)
            if not result.accepted:
                sys.stderr.write(result.report.to_text())
                return 2
            sys.stderr.write(result.outcome.describe() + "\n")
            return result.outcome.exit_code
        else:
            raise G.FrameError(f"unexpected frame type {kind} from host")
