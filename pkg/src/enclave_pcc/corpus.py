"""Bundled kernel corpus, deterministic inputs and adversarial variants."""
from __future__ import annotations

import random
import struct
from importlib import resources

from .loader import EnclaveLayout

# kernels that use ocall_recv need a host message; the rest run on input data alone
RECV_KERNELS = frozenset({"echo_recv"})


def _dir():
    return resources.files("enclave_pcc") / "kernels"


def kernel_names() -> list[str]:
    return sorted(p.name[:-2] for p in _dir().iterdir() if p.name.endswith(".s"))


def kernel_source(name: str) -> str:
    return (_dir() / f"{name}.s").read_text()


def adversarial_names() -> list[str]:
    return sorted(p.name[:-2] for p in (_dir() / "adversarial").iterdir() if p.name.endswith(".s"))


def adversarial_source(name: str) -> str:
    return (_dir() / "adversarial" / f"{name}.s").read_text()


def _qwords(values) -> bytes:
    return b"".join(struct.pack("<Q", v & 0xFFFFFFFFFFFFFFFF) for v in values)


def sample_input(name: str, seed: int = 0) -> bytes:
    rng = random.Random(f"{name}:{seed}")
    if name == "memcpy":
        return bytes(rng.randrange(256) for _ in range(1003))
    if name == "numeric_sort":
        return _qwords(rng.randrange(-(1 << 40), 1 << 40) for _ in range(48))
    if name == "string_sort":
        words = [rng.choice(["pear", "apple", "fig", "kiwi", "plum", "lime", "date"]) for _ in range(20)]
        return b"".join(w.encode().ljust(16, b"\0")[::-1] for w in words)
    if name == "one_bit":
        return _qwords([1000] + [rng.randrange(120) for _ in range(15)])
    if name == "fib":
        return bytes([11]) + bytes(7)
    if name == "matmul":
        return _qwords(rng.randrange(-50, 50) for _ in range(32))
    if name == "reverse":
        return _qwords(rng.getrandbits(64) for _ in range(40))
    if name == "echo_digest":
        return bytes(rng.randrange(256) for _ in range(200))
    return _qwords(rng.getrandbits(64) for _ in range(48))


# Snippets placed at the start of ``main``; each attempts one confinement breach.
def adversarial_snippets(layout: EnclaveLayout) -> dict[str, str]:
    shadow = layout.shadow.base
    return {
        "store_below_window": "    mov rax, rdi\n    sub rax, 8\n    mov [rax], rdi\n",
        "store_above_stack": f"    movabs rax, {layout.stack.end:#x}\n    mov [rax], rdi\n",
        "store_into_shadow": f"    movabs rax, {shadow:#x}\n    mov [rax+8], rdi\n",
        "store_into_code": "    movabs rax, __adv_target\n    mov [rax], rdi\n",
        "jump_off_list": "    movabs rax, __adv_target\n    add rax, 1\n    jmp rax\n",
        "jump_into_data": "    mov rax, rdi\n    call rax\n",
        "corrupt_return": "    call __adv_corrupt\n",
    }


_ADV_FUNCTIONS = """
__adv_target:
    ret

__adv_corrupt:
    mov rax, rsp
    add rax, 64
    mov [rsp], rax
    ret
"""


def adversarial_variant(source: str, snippet: str) -> str:
    """``source`` with ``snippet`` run first in ``main`` plus helper functions."""
    lines = source.splitlines()
    for i, line in enumerate(lines):
        if line.split("#", 1)[0].strip() == "main:":
            lines.insert(i + 1, snippet.rstrip("\n"))
            break
    else:
        raise ValueError("source has no main")
    return "\n".join(lines) + "\n" + _ADV_FUNCTIONS
