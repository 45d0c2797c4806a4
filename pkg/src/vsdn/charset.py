"""Symbol inventories shared by every head of the network.

Visual characters occupy indices 0..35 in all class spaces so that a
character keeps the same id whether it comes out of the CTC branch, the
attention decoders or the embedding table.
"""

CHARSET = "abcdefghijklmnopqrstuvwxyz0123456789"
N_VIS = len(CHARSET)  # 36

# CTC: 36 characters + blank
CTC_BLANK = N_VIS
N_CTC = N_VIS + 1  # 37

# attention decoders: 36 characters + EoS, UKN, PAD
EOS = N_VIS
UKN = N_VIS + 1
PAD = N_VIS + 2
N_DEC = N_VIS + 3  # 39

# BOS only lives in the embedding table, never in a classifier
BOS = N_DEC
N_EMBED = N_DEC + 1

CHAR_TO_ID = {c: i for i, c in enumerate(CHARSET)}


class CharsetError(ValueError):
    """A string contains a character outside the 36-symbol charset."""

    def __init__(self, word, char):
        super().__init__(f"character {char!r} in {word!r} is not in the charset")
        self.word = word
        self.char = char


def check_word(word: str) -> None:
    for ch in word:
        if ch not in CHAR_TO_ID:
            raise CharsetError(word, ch)


def encode(word: str) -> list[int]:
    check_word(word)
    return [CHAR_TO_ID[c] for c in word]


def decode_ids(ids, stop_at_eos: bool = True) -> str:
    """Map decoder class ids back to text; UKN renders as '?'."""
    out = []
    for i in ids:
        i = int(i)
        if i < N_VIS:
            out.append(CHARSET[i])
        elif i == EOS or i == PAD:
            if stop_at_eos:
                break
        elif i == UKN:
            out.append("?")
    return "".join(out)


def ctc_min_length(label: str) -> int:
    """Frames needed to emit `label` under the CTC collapse rule."""
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return len(label) + repeats
