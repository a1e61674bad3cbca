import pytest

from mtfs import crypto
from mtfs.errors import BadSignature, ChainCorrupted, LedgerDown, NotFound
from mtfs.ledger import (
    SEAL_INTERVAL_MS,
    ZERO_HASH,
    Block,
    FileSend,
    Ledger,
    StorageContract,
    Transaction,
    decode_chain,
    find_invalid_height,
    verify_chain,
    verify_chain_bytes,
)

A = crypto.keygen(seed="ledger-a")
B = crypto.keygen(seed="ledger-b")


def contract(kp, root, gid="0", accepts=()):
    return Transaction.create(kp.private, StorageContract(kp.public.digest(), root, gid, accepts))


def test_genesis():
    led = Ledger()
    assert led.height == 0
    assert led.blocks[0].prev_hash == ZERO_HASH
    assert led.verify()


def test_submit_receipts_ordered():
    led = Ledger()
    r1 = led.submit(contract(A, "11" * 32))
    r2 = led.submit(contract(B, "22" * 32))
    assert (r1.height, r1.index) != (r2.height, r2.index)
    assert (r1.height, r1.index) < (r2.height, r2.index)
    block = led.wait_for(r2)
    assert block.height == 1 and len(block.transactions) == 2
    r3 = led.submit(contract(A, "33" * 32))
    assert r3.height == 2


def test_bad_signature():
    led = Ledger()
    tx = contract(A, "11" * 32)
    forged = Transaction(StorageContract(A.public.digest(), "99" * 32, "0"), tx.signer, tx.signature)
    with pytest.raises(BadSignature):
        led.submit(forged)
    impostor = Transaction.create(B.private, StorageContract(A.public.digest(), "11" * 32, "0"))
    with pytest.raises(BadSignature):
        led.submit(impostor)


def test_ledger_down():
    led = Ledger()
    led.available = False
    with pytest.raises(LedgerDown):
        led.submit(contract(A, "11" * 32))


def test_seal_policy_count_and_interval():
    led = Ledger()
    for i in range(16):
        led.submit(contract(A, f"{i:064x}"))
    assert led.height == 1 and not led.pending
    led.submit(contract(A, "aa" * 32))
    assert led.tick(led.blocks[-1].timestamp + SEAL_INTERVAL_MS - 1) is None
    assert led.tick(led.blocks[-1].timestamp + SEAL_INTERVAL_MS).height == 2


def test_latest_root_and_cancellation():
    led = Ledger()
    with pytest.raises(NotFound):
        led.latest_root(A.public.digest())
    led.submit(contract(A, "11" * 32, "0"))
    led.submit(contract(B, "22" * 32, "1"))
    led.submit(contract(A, "33" * 32, "01"))
    led.seal()
    p = led.latest_root(A.public.digest())
    assert (p.root_ref, p.group_id) == ("33" * 32, "01")
    led.submit(contract(A, ""))
    led.seal()
    with pytest.raises(NotFound):
        led.latest_root(A.public.digest())


def test_pending_shares():
    led = Ledger()
    assert led.pending_shares(B.public.digest()) == []
    grant = Transaction.create(A.private, FileSend(A.public.digest(), B.public.digest(), "11" * 32, "22" * 32, "f", 3))
    led.submit(grant)
    led.seal()
    assert [t.tx_id for t in led.pending_shares(B.public.digest())] == [grant.tx_id]
    led.submit(contract(B, "44" * 32, accepts=(grant.tx_id,)))
    led.seal()
    assert led.pending_shares(B.public.digest()) == []
    assert led.find(grant.tx_id) == grant


def test_verify_chain_detects_mutation_at_height():
    led = Ledger()
    for i in range(4):
        led.submit(contract(A, f"{i:064x}"))
        led.seal()
    assert verify_chain(led.blocks)
    b3 = led.blocks[3]
    tx = b3.transactions[0]
    mutated = Transaction(StorageContract(tx.body.owner, "ff" * 32, tx.body.group_id), tx.signer, tx.signature)
    chain = led.blocks[:3] + [Block(b3.height, b3.prev_hash, b3.tx_root, b3.timestamp, (mutated,))] + led.blocks[4:]
    assert find_invalid_height(chain) == 3
    assert verify_chain(led.blocks[:1])


def test_byte_mutations_detected():
    led = Ledger()
    led.submit(contract(A, "11" * 32))
    led.seal()
    raw = led.to_bytes()
    assert verify_chain_bytes(raw)
    for pos in range(0, len(raw), 7):
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        assert not verify_chain_bytes(bytes(bad))


def test_persistence(tmp_path):
    path = tmp_path / "chain"
    led = Ledger(path=path)
    led.submit(contract(A, "11" * 32))
    led.seal()
    again = Ledger(path=path)
    assert again.to_bytes() == led.to_bytes()
    assert again.latest_root(A.public.digest()).root_ref == "11" * 32
    again.submit(contract(A, "22" * 32))
    again.seal()
    assert decode_chain(path.read_bytes())[-1].height == 2
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ChainCorrupted):
        Ledger(path=path)


def test_transaction_serialization():
    tx = Transaction.create(A.private, FileSend(A.public.digest(), B.public.digest(), "11" * 32, "22" * 32))
    assert Transaction.from_dict(tx.to_dict()) == tx
    assert tx.verify()
