"""Enclave boundary: mock attestation, sealed channel, ecalls/ocalls and host frames."""
from __future__ import annotations

import hashlib
import os
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import BinaryIO

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .bundle import CodeProofBundle, Mode, PolicyManifest, decode_bundle, encode_bundle

NONCE_SIZE = 16
AEAD_NONCE = 12
AEAD_TAG = 16
LENGTH_PREFIX = 4
# bytes added to every padded message: length prefix, explicit nonce, tag
OVERHEAD = LENGTH_PREFIX + AEAD_NONCE + AEAD_TAG

TO_ENCLAVE = 1
FROM_ENCLAVE = 2

FRAME_QUOTE = 1
FRAME_CODE = 2
FRAME_DATA = 3
FRAME_SEND = 4
FRAME_RECV = 5
_FRAME = struct.Struct("<BI")
MAX_FRAME = 1 << 28

_TEST_KEY_SEED = hashlib.sha256(b"enclave-pcc mock attestation key").digest()


class GatewayError(Exception):
    @property
    def fault_kind(self) -> str:
        return type(self).__name__


class AuthFailure(GatewayError):
    pass


class NonceReplay(GatewayError):
    pass


class QuoteRejected(GatewayError):
    pass


class SendQuotaExceeded(GatewayError):
    pass


class OutputBudgetExceeded(GatewayError):
    pass


class OutputTooLong(GatewayError):
    pass


class RecvDisallowed(GatewayError):
    pass


class QueueEmpty(GatewayError):
    pass


class DataTooLarge(GatewayError):
    pass


class FrameError(GatewayError):
    pass


def mock_signing_key() -> Ed25519PrivateKey:
    """Repository-local attestation key standing in for the hardware quoting key."""
    return Ed25519PrivateKey.from_private_bytes(_TEST_KEY_SEED)


def mock_verification_key() -> Ed25519PublicKey:
    return mock_signing_key().public_key()


def _raw(pub) -> bytes:
    return pub.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    @classmethod
    def compute(cls, build_id: str, layout_text: str, manifest: PolicyManifest) -> Measurement:
        h = hashlib.sha256()
        for part in (build_id.encode(), layout_text.encode(), _manifest_bytes(manifest)):
            h.update(len(part).to_bytes(8, "little"))
            h.update(part)
        return cls(h.digest())

    def hex(self) -> str:
        return self.digest.hex()


def _manifest_bytes(m: PolicyManifest) -> bytes:
    return struct.pack(
        "<BBIIIII", int(m.policies), 0 if m.mode is Mode.CCAAS else 1,
        m.pad_length, m.max_sends, m.max_output_bits, m.ssa_stride_k, m.aex_threshold,
    )


@dataclass(frozen=True)
class Quote:
    measurement: Measurement
    nonce: bytes
    enclave_public: bytes
    client_public: bytes
    signature: bytes

    def signed_part(self) -> bytes:
        return b"QUOTE" + self.measurement.digest + self.nonce + self.enclave_public + self.client_public

    def to_bytes(self) -> bytes:
        return self.measurement.digest + self.nonce + self.enclave_public + self.client_public + self.signature

    @classmethod
    def from_bytes(cls, raw: bytes) -> Quote:
        if len(raw) != 32 + NONCE_SIZE + 32 + 32 + 64:
            raise QuoteRejected("quote has the wrong length")
        m, rest = raw[:32], raw[32:]
        nonce, rest = rest[:NONCE_SIZE], rest[NONCE_SIZE:]
        return cls(Measurement(m), nonce, rest[:32], rest[32:64], rest[64:])


def _derive_key(shared: bytes, nonce: bytes, measurement: Measurement, client_pub: bytes, enclave_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=nonce,
        info=b"session" + measurement.digest + client_pub + enclave_pub,
    ).derive(shared)


class SecureChannel:
    """AES-GCM with explicit direction+sequence nonces; replays and reordering fail."""

    def __init__(self, key: bytes):
        self._aead = AESGCM(key)
        self._next_seq = {TO_ENCLAVE: 0, FROM_ENCLAVE: 0}
        self._seen_seq = {TO_ENCLAVE: -1, FROM_ENCLAVE: -1}

    def seal(self, direction: int, kind: int, plaintext: bytes) -> bytes:
        seq = self._next_seq[direction]
        self._next_seq[direction] = seq + 1
        nonce = struct.pack("<IQ", direction, seq)
        return nonce + self._aead.encrypt(nonce, plaintext, bytes([kind]))

    def open(self, direction: int, kind: int, ciphertext: bytes) -> bytes:
        if len(ciphertext) < AEAD_NONCE + AEAD_TAG:
            raise AuthFailure("ciphertext too short")
        nonce = ciphertext[:AEAD_NONCE]
        got_dir, seq = struct.unpack("<IQ", nonce)
        if got_dir != direction or seq <= self._seen_seq[direction]:
            raise AuthFailure("unexpected direction or replayed sequence number")
        try:
            plain = self._aead.decrypt(nonce, ciphertext[AEAD_NONCE:], bytes([kind]))
        except InvalidTag:
            raise AuthFailure("authentication tag mismatch") from None
        self._seen_seq[direction] = seq
        return plain


def pad(plaintext: bytes, pad_length: int) -> bytes:
    if len(plaintext) > pad_length:
        raise OutputTooLong(f"{len(plaintext)} bytes exceed pad length {pad_length}")
    return struct.pack("<I", len(plaintext)) + plaintext + bytes(pad_length - len(plaintext))


def unpad(block: bytes) -> bytes:
    (n,) = struct.unpack_from("<I", block)
    if n > len(block) - LENGTH_PREFIX:
        raise AuthFailure("bad padded length")
    return block[LENGTH_PREFIX:LENGTH_PREFIX + n]


@dataclass
class Session:
    session_key: bytes
    mode: Mode = Mode.CCAAS
    pad_length: int = 256
    max_sends: int = 0xFFFFFFFF
    output_bits_budget: int = 8
    sends_used: int = 0
    bits_used: int = 0
    emitted: list[bytes] = field(default_factory=list)
    recv_queue: deque = field(default_factory=deque)

    def __post_init__(self):
        self.channel = SecureChannel(self.session_key)

    @classmethod
    def for_manifest(cls, key: bytes, manifest: PolicyManifest) -> Session:
        return cls(key, manifest.mode, manifest.pad_length, manifest.max_sends, manifest.max_output_bits)

    @property
    def frame_length(self) -> int:
        return self.pad_length + OVERHEAD

    # emulator-facing channel interface
    def send(self, data: bytes) -> None:
        ocall_send(data, self)

    def recv(self, maxlen: int) -> bytes:
        return ocall_recv(self, maxlen)


def ocall_send(plaintext: bytes, session: Session) -> bytes:
    if session.sends_used >= session.max_sends:
        raise SendQuotaExceeded(f"send quota of {session.max_sends} used up")
    block = pad(plaintext, session.pad_length)
    if session.mode is Mode.CDAAS:
        bits = 8 * len(plaintext)
        if session.bits_used + bits > session.output_bits_budget:
            raise OutputBudgetExceeded(f"{bits} bits exceed the remaining budget")
        session.bits_used += bits
    session.sends_used += 1
    ct = session.channel.seal(FROM_ENCLAVE, FRAME_SEND, block)
    session.emitted.append(ct)
    return ct


def ocall_recv(session: Session, maxlen: int | None = None) -> bytes:
    if session.mode is not Mode.CCAAS:
        raise RecvDisallowed("recv is only available in CCaaS mode")
    if not session.recv_queue:
        raise QueueEmpty("no queued host message")
    data = session.channel.open(TO_ENCLAVE, FRAME_RECV, session.recv_queue.popleft())
    return data if maxlen is None else data[:maxlen]


def ecall_receive_binary(ciphertext: bytes, session: Session) -> CodeProofBundle:
    return decode_bundle(session.channel.open(TO_ENCLAVE, FRAME_CODE, ciphertext))


def ecall_receive_userdata(ciphertext: bytes, session: Session, capacity: int) -> bytes:
    data = session.channel.open(TO_ENCLAVE, FRAME_DATA, ciphertext)
    if len(data) > capacity:
        raise DataTooLarge(f"{len(data)} bytes exceed the data region capacity {capacity}")
    return data


class AttestationService:
    """Enclave side of the handshake."""

    def __init__(self, measurement: Measurement, signing_key: Ed25519PrivateKey | None = None):
        self.measurement = measurement
        self._key = signing_key or mock_signing_key()
        self._nonces: set[bytes] = set()

    def attest(self, nonce: bytes, client_public: bytes) -> tuple[Quote, bytes]:
        if len(nonce) != NONCE_SIZE:
            raise QuoteRejected("nonce has the wrong length")
        if nonce in self._nonces:
            raise NonceReplay(nonce.hex())
        self._nonces.add(nonce)
        eph = X25519PrivateKey.generate()
        enclave_public = _raw(eph.public_key())
        shared = eph.exchange(X25519PublicKey.from_public_bytes(client_public))
        unsigned = Quote(self.measurement, nonce, enclave_public, client_public, b"")
        quote = Quote(self.measurement, nonce, enclave_public, client_public, self._key.sign(unsigned.signed_part()))
        return quote, _derive_key(shared, nonce, self.measurement, client_public, enclave_public)


class Client:
    """Data owner / code provider side: checks the quote and derives the same key."""

    def __init__(self, expected: Measurement, verification_key: Ed25519PublicKey | None = None):
        self.expected = expected
        self._verify_key = verification_key or mock_verification_key()
        self._eph = X25519PrivateKey.generate()
        self.nonce = os.urandom(NONCE_SIZE)
        self.public = _raw(self._eph.public_key())
        self.channel: SecureChannel | None = None

    def hello(self) -> bytes:
        return self.nonce + self.public

    def accept(self, quote: Quote) -> bytes:
        try:
            self._verify_key.verify(quote.signature, quote.signed_part())
        except InvalidSignature:
            raise QuoteRejected("bad quote signature") from None
        if quote.measurement != self.expected:
            raise QuoteRejected("unexpected measurement")
        if quote.nonce != self.nonce or quote.client_public != self.public:
            raise QuoteRejected("quote does not answer this handshake")
        shared = self._eph.exchange(X25519PublicKey.from_public_bytes(quote.enclave_public))
        key = _derive_key(shared, self.nonce, quote.measurement, self.public, quote.enclave_public)
        self.channel = SecureChannel(key)
        return key

    def seal_bundle(self, bundle: CodeProofBundle | bytes) -> bytes:
        raw = encode_bundle(bundle) if isinstance(bundle, CodeProofBundle) else bundle
        return self.channel.seal(TO_ENCLAVE, FRAME_CODE, raw)

    def seal_data(self, data: bytes) -> bytes:
        return self.channel.seal(TO_ENCLAVE, FRAME_DATA, data)

    def seal_message(self, data: bytes) -> bytes:
        return self.channel.seal(TO_ENCLAVE, FRAME_RECV, data)

    def open_output(self, ciphertext: bytes) -> bytes:
        return unpad(self.channel.open(FROM_ENCLAVE, FRAME_SEND, ciphertext))


# ----------------------------------------------------------------- framing


def encode_frame(kind: int, payload: bytes) -> bytes:
    return _FRAME.pack(kind, len(payload)) + payload


def write_frame(stream: BinaryIO, kind: int, payload: bytes) -> None:
    stream.write(encode_frame(kind, payload))
    stream.flush()


def read_frame(stream: BinaryIO) -> tuple[int, bytes] | None:
    """Next frame from ``stream``; None at a clean end of stream."""
    head = stream.read(_FRAME.size)
    if not head:
        return None
    if len(head) < _FRAME.size:
        raise FrameError("truncated frame header")
    kind, length = _FRAME.unpack(head)
    if kind not in (FRAME_QUOTE, FRAME_CODE, FRAME_DATA, FRAME_SEND, FRAME_RECV):
        raise FrameError(f"unknown frame type {kind}")
    if length > MAX_FRAME:
        raise FrameError("frame too large")
    payload = stream.read(length)
    if len(payload) != length:
        raise FrameError("truncated frame payload")
    return kind, payload
