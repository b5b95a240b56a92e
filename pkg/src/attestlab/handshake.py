"""Four-message mutual attestation handshake over an in-process network.

Wire format: every flow carries (sender_id, m, i_tag) where m is AES-128-CBC
ciphertext under the pair's outer key and i_tag = HMAC-SHA256(m, K) over the
ciphertext (encrypt-then-MAC). Payloads:

    m1 = Enc( ID_i | N1 | R_i )            R_* = 48-byte encrypted report
    m2 = Enc( ID_j | N1 | N2 | R_j )
    m3 = Enc( ID_i | N2 | N3 )
    m4 = Enc( ID_j | N3 | N4 )

Receivers verify the tag, decrypt, check the embedded identity, check the
nonce echo, and validate reports through the attestation state machine.
Every failure is silent and fail-closed: the session ends with a recorded
reason and no outbound message. A scripted adversary can drop, replay,
tamper, inject, impersonate, or delay flows; it never reads the key store.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace as dc_replace

from . import secure_channel as sc
from .attestor import (AttestationContext, ConfigurationError, OutcomeKind,
                       run_attestation, REPORT_WIRE_LEN, DEVICE_ID_LEN,
                       DEFAULT_EXPIRY_MS)
from .quantize import QuantizedModel
from .trace import FirmwareProfile, sample_traces

# session phases
START, SENT1, SENT2, SENT3, SENT4, DONE, FAILED = (
    "start", "sent1", "sent2", "sent3", "sent4", "done", "failed")

# failure reasons
BAD_HMAC = "bad_hmac"
BAD_NONCE_ECHO = "bad_nonce_echo"
BAD_LAYOUT = "bad_layout"
REPORT_EXPIRED = "report_expired"
REPORT_INCONSISTENT_ID = "report_inconsistent_id"
PEER_UNSAFE = "peer_unsafe"
SETUP = "setup"

_ABORT_REASON = {
    OutcomeKind.ABORT_INCONSISTENT_ID: REPORT_INCONSISTENT_ID,
    OutcomeKind.ABORT_EXPIRED_REPORT: REPORT_EXPIRED,
    OutcomeKind.SENDER_UNSAFE: PEER_UNSAFE,
}

_PLAIN_LEN = {1: DEVICE_ID_LEN + sc.NONCE_LEN + REPORT_WIRE_LEN,
              2: DEVICE_ID_LEN + 2 * sc.NONCE_LEN + REPORT_WIRE_LEN,
              3: DEVICE_ID_LEN + 2 * sc.NONCE_LEN,
              4: DEVICE_ID_LEN + 2 * sc.NONCE_LEN}


@dataclass(frozen=True)
class HandshakeMessage:
    sender_id: bytes
    m: bytes
    i_tag: bytes


@dataclass
class SessionState:
    role: str                 # "initiator" | "responder"
    self_id: bytes
    peer_id: bytes
    phase: str = START
    nonces: dict = field(default_factory=dict)
    peer_verdict: int | None = None
    fail_reason: str | None = None
    log: list = field(default_factory=list)


class Device:
    """Simulated device: SRAM view, trusted attestation context, outer keys."""

    def __init__(self, device_id: bytes, profile: FirmwareProfile,
                 device_seed: int, qmodel: QuantizedModel, t_opt: float,
                 keystore: sc.KeyStore, clock, rng: sc.RandomSource,
                 agg_width: int = 4, expiry_ms: int = DEFAULT_EXPIRY_MS,
                 start_time_step: int = 0, time_steps=None):
        self.id = bytes(device_id)
        self.profile = profile
        self.device_seed = device_seed
        self.keystore = keystore
        self._time_step = start_time_step
        self._steps = None if time_steps is None else \
            [int(t) for t in time_steps]
        if self._steps is not None and not self._steps:
            raise ValueError("time_steps must be non-empty when given")
        self._step_idx = 0
        self._pool: list = []
        inner = {p: keystore.inner(self.id, p)
                 for p in keystore.peers(self.id)}
        self.ctx = AttestationContext(
            self_id=self.id, qmodel=qmodel, t_opt=t_opt, inner_keys=inner,
            clock=clock, rng=rng, sram_view=self._sram_view,
            agg_width=agg_width, expiry_ms=expiry_ms)

    def _sram_view(self):
        if not self._pool:
            if self._steps is not None:
                steps = [self._steps[(self._step_idx + k) % len(self._steps)]
                         for k in range(256)]
                self._step_idx = (self._step_idx + 256) % len(self._steps)
            else:
                steps = range(self._time_step, self._time_step + 256)
                self._time_step += 256
            self._pool = sample_traces(self.profile, self.device_seed, steps)
        return self._pool.pop(0)

    def outer_key(self, peer_id: bytes) -> bytes:
        return self.keystore.outer(self.id, peer_id)


def _fail(state: SessionState, reason: str):
    state.phase = FAILED
    state.fail_reason = reason
    return state, None


def _seal(device: Device, state: SessionState, plain: bytes):
    key = device.outer_key(state.peer_id)
    m = sc.enc(plain, key, device.ctx.rng)
    return HandshakeMessage(sender_id=device.id, m=m,
                            i_tag=sc.hmac_tag(m, key))


def _open(device: Device, state: SessionState, msg: HandshakeMessage,
          expected_len: int):
    """Tag check, decrypt, structural checks. Returns plaintext or reason."""
    try:
        key = device.outer_key(state.peer_id)
    except KeyError:
        return None, BAD_HMAC
    if not sc.hmac_verify(msg.m, key, msg.i_tag):
        return None, BAD_HMAC
    if bytes(msg.sender_id) != bytes(state.peer_id):
        return None, BAD_LAYOUT
    try:
        plain = sc.dec(msg.m, key)
    except sc.DecryptError:
        return None, BAD_LAYOUT
    if len(plain) != expected_len:
        return None, BAD_LAYOUT
    if plain[:DEVICE_ID_LEN] != bytes(state.peer_id):
        return None, BAD_LAYOUT
    return plain, None


def initiator_start(device: Device, peer_id: bytes,
                    report_override: bytes | None = None):
    """Produce a fresh self-report and the first flow of the handshake.

    report_override models a compromised normal world caching an old
    encrypted report instead of requesting a fresh one.
    """
    state = SessionState(role="initiator", self_id=device.id,
                         peer_id=bytes(peer_id))
    if report_override is not None:
        report = report_override
    else:
        try:
            outcome = run_attestation(device.ctx, sender_id=peer_id,
                                      self_attest_requested=True)
        except ConfigurationError:
            return _fail(state, SETUP)
        if outcome.kind is not OutcomeKind.COMPLETED or outcome.report is None:
            return _fail(state, SETUP)
        report = outcome.report
    n1 = device.ctx.fresh_nonce()
    state.nonces["n1"] = n1
    msg = _seal(device, state, device.id + n1 + report)
    state.phase = SENT1
    state.log.append(("out", 1, msg))
    return state, msg


def responder_start(device: Device, peer_id: bytes) -> SessionState:
    return SessionState(role="responder", self_id=device.id,
                        peer_id=bytes(peer_id))


def _validate_peer_report(device: Device, state: SessionState, report: bytes,
                          produce_own: bool):
    """Returns (reason_or_None, own_report_or_None)."""
    try:
        outcome = run_attestation(device.ctx, sender_id=state.peer_id,
                                  sender_report=report,
                                  self_attest_requested=produce_own)
    except ConfigurationError:
        return SETUP, None
    if outcome.kind in _ABORT_REASON:
        if outcome.kind is OutcomeKind.SENDER_UNSAFE:
            state.peer_verdict = 1
        return _ABORT_REASON[outcome.kind], None
    if outcome.kind is not OutcomeKind.COMPLETED:
        return SETUP, None
    state.peer_verdict = outcome.peer_verdict
    return None, outcome.report


def step(device: Device, state: SessionState, msg: HandshakeMessage):
    """Advance one protocol step. Returns (state, outbound-or-None)."""
    if state.phase in (DONE, FAILED):
        raise ValueError("step() called on a terminal session")
    state.log.append(("in", None, msg))

    if state.role == "responder" and state.phase == START:
        plain, reason = _open(device, state, msg, _PLAIN_LEN[1])
        if reason:
            return _fail(state, reason)
        n1 = plain[DEVICE_ID_LEN:DEVICE_ID_LEN + sc.NONCE_LEN]
        report = plain[DEVICE_ID_LEN + sc.NONCE_LEN:]
        reason, own_report = _validate_peer_report(device, state, report,
                                                   produce_own=True)
        if reason:
            return _fail(state, reason)
        n2 = device.ctx.fresh_nonce()
        state.nonces.update(n1=n1, n2=n2)
        out = _seal(device, state, device.id + n1 + n2 + own_report)
        state.phase = SENT2
        state.log.append(("out", 2, out))
        return state, out

    if state.role == "initiator" and state.phase == SENT1:
        plain, reason = _open(device, state, msg, _PLAIN_LEN[2])
        if reason:
            return _fail(state, reason)
        off = DEVICE_ID_LEN
        n1_echo = plain[off:off + sc.NONCE_LEN]
        n2 = plain[off + sc.NONCE_LEN:off + 2 * sc.NONCE_LEN]
        report = plain[off + 2 * sc.NONCE_LEN:]
        if n1_echo != state.nonces["n1"]:
            return _fail(state, BAD_NONCE_ECHO)
        reason, _ = _validate_peer_report(device, state, report,
                                          produce_own=False)
        if reason:
            return _fail(state, reason)
        n3 = device.ctx.fresh_nonce()
        state.nonces.update(n2=n2, n3=n3)
        out = _seal(device, state, device.id + n2 + n3)
        state.phase = SENT3
        state.log.append(("out", 3, out))
        return state, out

    if state.role == "responder" and state.phase == SENT2:
        plain, reason = _open(device, state, msg, _PLAIN_LEN[3])
        if reason:
            return _fail(state, reason)
        off = DEVICE_ID_LEN
        n2_echo = plain[off:off + sc.NONCE_LEN]
        n3 = plain[off + sc.NONCE_LEN:]
        if n2_echo != state.nonces["n2"]:
            return _fail(state, BAD_NONCE_ECHO)
        n4 = device.ctx.fresh_nonce()
        state.nonces.update(n3=n3, n4=n4)
        out = _seal(device, state, device.id + n3 + n4)
        state.phase = SENT4
        state.log.append(("out", 4, out))
        return state, out

    if state.role == "initiator" and state.phase == SENT3:
        plain, reason = _open(device, state, msg, _PLAIN_LEN[4])
        if reason:
            return _fail(state, reason)
        off = DEVICE_ID_LEN
        n3_echo = plain[off:off + sc.NONCE_LEN]
        n4 = plain[off + sc.NONCE_LEN:]
        if n3_echo != state.nonces["n3"]:
            return _fail(state, BAD_NONCE_ECHO)
        state.nonces.update(n4=n4)
        state.phase = DONE
        return state, None

    # a flow arrived in a phase that never expects one
    return _fail(state, BAD_LAYOUT)


# ---------------------------------------------------------------------------
# scripted adversaries

@dataclass(frozen=True)
class AdversaryAction:
    kind: str                 # drop|replay|tamper|inject|impersonate|delay
    step: int                 # 1..4 message slot
    message: HandshakeMessage | None = None   # replay / inject payload
    target: str = "m"         # tamper target: m | tag | sender
    byte_index: int = 0
    xor_mask: int = 0x01
    delta_ms: int = 0
    fake_sender: bytes | None = None


class AdversaryScript:
    """In-path adversary: applies scripted actions to message slots.

    It sees and may replace ciphertext flows but never touches the key
    store. Unscripted slots pass messages through unchanged.
    """

    def __init__(self, actions: list[AdversaryAction] | None = None):
        self.actions = list(actions or [])
        for a in self.actions:
            if a.kind not in ("drop", "replay", "tamper", "inject",
                              "impersonate", "delay"):
                raise ValueError("unknown adversary action %r" % a.kind)
            if not 1 <= a.step <= 4:
                raise ValueError("action step must be 1..4")

    def transform(self, slot: int, honest: HandshakeMessage | None,
                  advance_clock):
        """Returns list of (label, message-or-None, altered_flag)."""
        acts = [a for a in self.actions if a.step == slot]
        if not acts:
            return [("passthrough", honest, False)] if honest else []
        out = []
        cur = honest
        for a in acts:
            if a.kind == "drop":
                out.append(("drop", None, False))
                cur = None
            elif a.kind == "delay":
                advance_clock(a.delta_ms)
                if cur is not None:
                    out.append(("delay", cur, False))
            elif a.kind == "replay":
                out.append(("replay", a.message, True))
            elif a.kind == "inject":
                out.append(("inject", a.message, True))
            elif a.kind == "impersonate":
                base = cur or a.message
                if base is None:
                    continue
                fake = dc_replace(base, sender_id=bytes(a.fake_sender))
                out.append(("impersonate", fake, True))
            elif a.kind == "tamper":
                if cur is None:
                    continue
                if a.target == "m":
                    buf = bytearray(cur.m)
                    buf[a.byte_index % len(buf)] ^= a.xor_mask
                    mod = dc_replace(cur, m=bytes(buf))
                elif a.target == "tag":
                    buf = bytearray(cur.i_tag)
                    buf[a.byte_index % len(buf)] ^= a.xor_mask
                    mod = dc_replace(cur, i_tag=bytes(buf))
                else:
                    buf = bytearray(cur.sender_id)
                    buf[a.byte_index % len(buf)] ^= a.xor_mask
                    mod = dc_replace(cur, sender_id=bytes(buf))
                out.append(("tamper", mod, True))
        return out


@dataclass
class TranscriptEntry:
    session_id: str
    step: int
    direction: str
    sender_id: str
    payload_hex: str
    tag_hex: str
    adversary_action: str
    verdict: str


@dataclass
class SessionOutcome:
    session_id: str
    completed: bool
    verdict: str
    initiator_phase: str
    responder_phase: str
    initiator_reason: str | None
    responder_reason: str | None
    initiator_peer_verdict: int | None
    responder_peer_verdict: int | None
    adversary_win: bool
    transcript: list


def run_session(initiator: Device, responder: Device,
                adversary: AdversaryScript | None = None,
                session_id: str = "s0",
                report_override: bytes | None = None) -> SessionOutcome:
    """Drive one handshake through the adversarial network.

    An adversary-altered flow counts as a win if its receiver accepts it,
    except a replayed first flow, which carries a fresh-looking report and
    is only rejected later by the nonce echo or its timestamp.
    """
    adversary = adversary or AdversaryScript()
    transcript: list[TranscriptEntry] = []
    win = False

    i_state, honest = initiator_start(initiator, responder.id,
                                      report_override=report_override)
    r_state = responder_start(responder, initiator.id)
    clock = initiator.ctx.clock

    def advance(ms):
        clock.advance(ms)

    for slot in (1, 2, 3, 4):
        to_responder = slot % 2 == 1
        receiver_dev = responder if to_responder else initiator
        receiver_state = r_state if to_responder else i_state
        direction = "i->j" if to_responder else "j->i"
        deliveries = adversary.transform(slot, honest, advance)
        honest = None
        for label, dmsg, altered in deliveries:
            if dmsg is None:
                transcript.append(TranscriptEntry(
                    session_id=session_id, step=slot, direction=direction,
                    sender_id="", payload_hex="", tag_hex="",
                    adversary_action=label, verdict="dropped"))
                continue
            entry = TranscriptEntry(
                session_id=session_id, step=slot, direction=direction,
                sender_id=bytes(dmsg.sender_id).hex(),
                payload_hex=bytes(dmsg.m).hex(),
                tag_hex=bytes(dmsg.i_tag).hex(),
                adversary_action=label, verdict="")
            if receiver_state.phase in (DONE, FAILED):
                entry.verdict = "ignored"
                transcript.append(entry)
                continue
            receiver_state, out = step(receiver_dev, receiver_state, dmsg)
            if receiver_state.phase == FAILED:
                entry.verdict = "rejected:%s" % receiver_state.fail_reason
            else:
                entry.verdict = "accepted"
                if altered and not (label == "replay" and slot == 1):
                    win = True
                if out is not None:
                    honest = out
            transcript.append(entry)
        if to_responder:
            r_state = receiver_state
        else:
            i_state = receiver_state

    if r_state.phase == SENT4 and i_state.phase == DONE:
        r_state.phase = DONE

    completed = i_state.phase == DONE and r_state.phase == DONE
    if completed:
        verdict = "completed"
    elif i_state.fail_reason or r_state.fail_reason:
        verdict = "failed:%s" % (r_state.fail_reason or i_state.fail_reason)
    else:
        verdict = "stalled"
    return SessionOutcome(
        session_id=session_id, completed=completed, verdict=verdict,
        initiator_phase=i_state.phase, responder_phase=r_state.phase,
        initiator_reason=i_state.fail_reason,
        responder_reason=r_state.fail_reason,
        initiator_peer_verdict=i_state.peer_verdict,
        responder_peer_verdict=r_state.peer_verdict,
        adversary_win=win, transcript=transcript)


def record_honest_session(initiator: Device, responder: Device,
                          session_id: str = "rec") -> list[HandshakeMessage]:
    """Run a passthrough session and return its four flows for replay."""
    outcome = run_session(initiator, responder, session_id=session_id)
    if not outcome.completed:
        raise RuntimeError("recording session did not complete: %s"
                           % outcome.verdict)
    return [HandshakeMessage(sender_id=bytes.fromhex(e.sender_id),
                             m=bytes.fromhex(e.payload_hex),
                             i_tag=bytes.fromhex(e.tag_hex))
            for e in outcome.transcript]
