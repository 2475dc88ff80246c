"""Deterministic synthetic corpora.

A small template grammar produces role-annotated explanatory sentences over a
fixed taxonomy, and a latex-expression generator produces five evaluation
splits probing out-of-distribution behaviour.  Tokenization is word-level so
token positions align one-to-one with role labels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, InputError

ROLES = ("ARG0", "ARG1", "ARG2", "PRED", "MOD", "NEG", "O")

TOPIC_IS_A = "is-a"
TOPIC_REQUIRES = "requires"
TOPIC_CAUSE = "cause"
TOPIC_MEAN = "mean"
TOPIC_IF_THEN = "if-then"
TOPIC_CAN = "can"
TOPICS = (TOPIC_IS_A, TOPIC_REQUIRES, TOPIC_CAUSE, TOPIC_MEAN, TOPIC_IF_THEN, TOPIC_CAN)

# Fixed taxonomy: specific noun -> class noun -> broad category.  Keeping it
# seed-independent means every corpus shares one consistent world, so derived
# conclusions never contradict sampled sentences.
SPECIFIC_TO_MIDDLE = {
    "shark": "fish", "salmon": "fish", "trout": "fish", "eel": "fish",
    "eagle": "bird", "sparrow": "bird", "owl": "bird", "crow": "bird",
    "beetle": "insect", "ant": "insect", "bee": "insect", "moth": "insect",
    "snake": "reptile", "lizard": "reptile", "turtle": "reptile", "gecko": "reptile",
    "frog": "amphibian", "toad": "amphibian", "newt": "amphibian", "salamander": "amphibian",
    "crab": "crustacean", "lobster": "crustacean", "shrimp": "crustacean", "krill": "crustacean",
    "oak": "tree", "pine": "tree", "birch": "tree", "maple": "tree",
    "rose": "flower", "daisy": "flower", "tulip": "flower", "orchid": "flower",
}
MIDDLE_TO_GENERAL = {
    "fish": ("aquatic", "animal"),
    "crustacean": ("aquatic", "animal"),
    "bird": ("animal",),
    "reptile": ("animal",),
    "insect": ("creature",),
    "amphibian": ("creature",),
    "tree": ("plant",),
    "flower": ("plant",),
}
SPECIFIC_NOUNS = tuple(SPECIFIC_TO_MIDDLE)
MIDDLE_NOUNS = tuple(MIDDLE_TO_GENERAL)

RESOURCES = ("water", "food", "energy", "oxygen", "sunlight", "warmth", "shelter", "something")
PURPOSES = ("survive", "grow", "live", "move", "breathe", "eat")
EVENTS = ("storm", "fire", "rain", "wind", "friction", "flood", "frost", "lightning",
          "earthquake", "drought")
EFFECTS = ("damage", "erosion", "motion", "heat", "growth", "decay", "change", "noise",
           "light", "pressure")
INTRANSITIVES = ("comes", "occurs", "grows", "falls", "rises", "spreads", "melts", "freezes")
ABILITY_VERBS = ("swim", "fly", "run", "jump", "climb", "dig", "hunt", "hide", "sing", "crawl")
VERB_SYNONYMS = (
    ("run", "move"), ("eat", "consume"), ("look", "see"), ("jump", "leap"),
    ("talk", "speak"), ("build", "make"), ("push", "press"), ("pull", "drag"),
    ("shine", "glow"), ("spin", "rotate"),
)

# Relation markers checked in order; used to classify arbitrary decoded output.
RELATION_MARKERS = ("causes", "means", "requires", "can", "is")


@dataclass
class AnnotatedSentence:
    tokens: list[str]
    roles: list[str]
    template_id: str
    topic_tag: str

    def __post_init__(self):
        if len(self.tokens) != len(self.roles):
            raise ContractError(f"{len(self.tokens)} tokens but {len(self.roles)} roles")
        if "PRED" not in self.roles:
            raise ContractError(f"sentence {' '.join(self.tokens)!r} has no PRED token")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ContractError(f"unknown roles {bad}")

    def text(self) -> str:
        return " ".join(self.tokens)


# -- template builders -------------------------------------------------------


def make_is_a(subject: str, obj: tuple[str, ...] | str, negated: bool = False) -> AnnotatedSentence:
    obj_tokens = [obj] if isinstance(obj, str) else list(obj)
    tokens = ["a", subject, "is"] + (["not"] if negated else []) + ["a", "kind", "of"] + obj_tokens
    roles = ["O", "ARG1", "PRED"] + (["NEG"] if negated else []) + ["O", "O", "O"] + ["ARG2"] * len(obj_tokens)
    return AnnotatedSentence(tokens, roles, "is_a_neg" if negated else "is_a", TOPIC_IS_A)


def make_requires(subject: str, resource: str, purpose: str) -> AnnotatedSentence:
    tokens = ["a", subject, "requires", resource, "to", purpose]
    roles = ["O", "ARG1", "PRED", "ARG2", "O", "MOD"]
    return AnnotatedSentence(tokens, roles, "requires", TOPIC_REQUIRES)


def make_causes(subject: str, effect: str) -> AnnotatedSentence:
    tokens = ["a", subject, "causes", effect]
    roles = ["O", "ARG1", "PRED", "ARG2"]
    return AnnotatedSentence(tokens, roles, "causes", TOPIC_CAUSE)


def make_means_nn(subject: str, obj: str) -> AnnotatedSentence:
    tokens = ["a", subject, "means", obj]
    roles = ["O", "ARG1", "PRED", "ARG2"]
    return AnnotatedSentence(tokens, roles, "means_nn", TOPIC_MEAN)


def make_means_vv(verb: str, synonym: str) -> AnnotatedSentence:
    tokens = [verb, "means", synonym]
    roles = ["ARG1", "PRED", "ARG2"]
    return AnnotatedSentence(tokens, roles, "means_vv", TOPIC_MEAN)


def make_if_then(event1: str, verb1: str, event2: str, verb2: str) -> AnnotatedSentence:
    tokens = ["if", "a", event1, verb1, "then", "a", event2, verb2]
    roles = ["O", "O", "ARG1", "PRED", "O", "O", "ARG2", "MOD"]
    return AnnotatedSentence(tokens, roles, "if_then", TOPIC_IF_THEN)


def make_can(subject: str, verb: str) -> AnnotatedSentence:
    tokens = ["a", subject, "can", verb]
    roles = ["O", "ARG1", "MOD", "PRED"]
    return AnnotatedSentence(tokens, roles, "can", TOPIC_CAN)


def make_can_conj(subject: str, verb1: str, verb2: str) -> AnnotatedSentence:
    tokens = ["a", subject, "can", verb1, "and", verb2]
    roles = ["O", "ARG1", "MOD", "PRED", "O", "PRED"]
    return AnnotatedSentence(tokens, roles, "can_conj", TOPIC_CAN)


def generate_sentences(seed: int, count: int) -> list[AnnotatedSentence]:
    """Sample ``count`` sentences cycling uniformly over the six families."""
    if count <= 0:
        raise ContractError(f"count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    out: list[AnnotatedSentence] = []

    def pick(pool):
        return pool[int(rng.integers(len(pool)))]

    while len(out) < count:
        family = TOPICS[len(out) % len(TOPICS)]
        if family == TOPIC_IS_A:
            subject = pick(SPECIFIC_NOUNS + MIDDLE_NOUNS)
            parent = (SPECIFIC_TO_MIDDLE.get(subject)
                      or MIDDLE_TO_GENERAL[subject])
            if rng.random() < 0.15:
                wrong = pick([m for m in MIDDLE_NOUNS if m != parent])
                out.append(make_is_a(subject, wrong, negated=True))
            else:
                out.append(make_is_a(subject, parent))
        elif family == TOPIC_REQUIRES:
            out.append(make_requires(pick(SPECIFIC_NOUNS), pick(RESOURCES), pick(PURPOSES)))
        elif family == TOPIC_CAUSE:
            out.append(make_causes(pick(EVENTS), pick(EFFECTS)))
        elif family == TOPIC_MEAN:
            if rng.random() < 0.3:
                out.append(make_means_vv(*pick(VERB_SYNONYMS)))
            else:
                out.append(make_means_nn(pick(EVENTS), pick(EFFECTS)))
        elif family == TOPIC_IF_THEN:
            out.append(make_if_then(pick(EVENTS), pick(INTRANSITIVES),
                                    pick(EVENTS), pick(INTRANSITIVES)))
        else:
            subject = pick(SPECIFIC_NOUNS)
            if rng.random() < 0.25:
                v1, v2 = pick(ABILITY_VERBS), pick(ABILITY_VERBS)
                out.append(make_can_conj(subject, v1, v2))
            else:
                out.append(make_can(subject, pick(ABILITY_VERBS)))
    return out


def infer_topic(tokens: list[str]) -> str:
    """Classify an arbitrary token sequence into a template family."""
    if "if" in tokens:
        return TOPIC_IF_THEN
    if "causes" in tokens:
        return TOPIC_CAUSE
    if "means" in tokens:
        return TOPIC_MEAN
    if "requires" in tokens:
        return TOPIC_REQUIRES
    if "can" in tokens:
        return TOPIC_CAN
    return TOPIC_IS_A


def extract_relation(tokens: list[str]) -> str | None:
    """First relation marker in the sentence, None when no marker appears."""
    for tok in tokens:
        if tok in RELATION_MARKERS:
            return tok
    return None


def role_spans(roles: list[str], wanted: set[str]) -> list[tuple[int, int]]:
    """Maximal [start, end) runs whose role labels fall in ``wanted``."""
    spans = []
    start = None
    for i, role in enumerate(roles + ["O"]):
        if role in wanted and start is None:
            start = i
        elif role not in wanted and start is not None:
            spans.append((start, i))
            start = None
    return spans


# -- inference instances ------------------------------------------------------


@dataclass
class InferenceInstance:
    """Two premises plus the conclusion the grammar derives for an operation."""
    premise1: AnnotatedSentence
    premise2: AnnotatedSentence
    op: str
    conclusion: AnnotatedSentence


def _arg_sub_instance(specific: str) -> InferenceInstance:
    middle = SPECIFIC_TO_MIDDLE[specific]
    general = MIDDLE_TO_GENERAL[middle]
    return InferenceInstance(
        premise1=make_is_a(specific, middle),
        premise2=make_is_a(middle, general),
        op="arg_sub",
        conclusion=make_is_a(specific, general),
    )


def _verb_sub_instance(pair: tuple[str, str], subject: str) -> InferenceInstance:
    verb, synonym = pair
    return InferenceInstance(
        premise1=make_means_vv(verb, synonym),
        premise2=make_can(subject, verb),
        op="verb_sub",
        conclusion=make_can(subject, synonym),
    )


def _further_spec_instance(subject: str, resource: str, purpose: str, verb: str) -> InferenceInstance:
    p1 = make_requires(subject, resource, purpose)
    p2 = make_can(subject, verb)
    conclusion = AnnotatedSentence(p2.tokens + ["to", purpose],
                                   p2.roles + ["O", "MOD"], "can_spec", TOPIC_CAN)
    return InferenceInstance(p1, p2, "further_spec", conclusion)


def _conjunction_instance(subject: str, verb1: str, verb2: str) -> InferenceInstance:
    return InferenceInstance(
        premise1=make_can(subject, verb1),
        premise2=make_can(subject, verb2),
        op="conjunction",
        conclusion=make_can_conj(subject, verb2, verb1),
    )


def generate_inference_instances(seed: int, count: int,
                                 ops: tuple[str, ...] = ("arg_sub", "verb_sub")) -> list[InferenceInstance]:
    """Deterministic premise/conclusion instances drawn from the taxonomy.

    The shark -> fish -> aquatic animal chain is always the first economic
    arg_sub instance so fixtures containing these instances cover it.
    """
    rng = np.random.default_rng(seed)
    pools: dict[str, list[InferenceInstance]] = {}
    if "arg_sub" in ops:
        specifics = ["shark"] + [s for s in SPECIFIC_NOUNS if s != "shark"]
        pools["arg_sub"] = [_arg_sub_instance(s) for s in specifics]
    if "verb_sub" in ops:
        combos = [(pair, noun) for pair in VERB_SYNONYMS for noun in SPECIFIC_NOUNS]
        order = rng.permutation(len(combos))
        pools["verb_sub"] = [_verb_sub_instance(*combos[i]) for i in order]
    if "further_spec" in ops:
        combos = [(s, r, p, v) for s in SPECIFIC_NOUNS[:8] for r in RESOURCES[:4]
                  for p in PURPOSES[:3] for v in ABILITY_VERBS[:3]]
        order = rng.permutation(len(combos))
        pools["further_spec"] = [_further_spec_instance(*combos[i]) for i in order]
    if "conjunction" in ops:
        combos = [(s, v1, v2) for s in SPECIFIC_NOUNS for v1 in ABILITY_VERBS[:5]
                  for v2 in ABILITY_VERBS[5:]]
        order = rng.permutation(len(combos))
        pools["conjunction"] = [_conjunction_instance(*combos[i]) for i in order]

    out: list[InferenceInstance] = []
    cursors = {op: 0 for op in pools}
    while len(out) < count:
        progressed = False
        for op in pools:
            if len(out) >= count:
                break
            if cursors[op] < len(pools[op]):
                out.append(pools[op][cursors[op]])
                cursors[op] += 1
                progressed = True
        if not progressed:
            raise ContractError(f"only {len(out)} distinct instances available for ops {ops}")
    return out


def derive_conclusion(p1: AnnotatedSentence, p2: AnnotatedSentence, op: str) -> list[str] | None:
    """Symbolic token-level application of an inference operation.

    Mirrors the latent-space substitution rules on plain tokens so arbitrary
    premise pairs can be scored; returns None when no anchor exists.
    """
    args = {"ARG0", "ARG1", "ARG2"}

    def spans(sent, wanted):
        return [(a, b, tuple(sent.tokens[a:b])) for a, b in role_spans(sent.roles, wanted)]

    if op in ("arg_sub", "verb_sub"):
        p1_args = spans(p1, args)
        candidates = spans(p2, args if op == "arg_sub" else {"PRED"})
        p2_all = {w for _, _, w in spans(p2, args | {"PRED"})}
        shared = shared_p1 = None
        for a, b, words in candidates:
            for s, e, w1 in p1_args:
                if words == w1:
                    shared, shared_p1 = (a, b), (s, e)
                    break
            if shared:
                break
        if shared is None:
            return None
        counterpart = next(((s, e) for s, e, w in p1_args if w not in p2_all), shared_p1)
        return (p2.tokens[:shared[0]] + p1.tokens[counterpart[0]:counterpart[1]]
                + p2.tokens[shared[1]:])
    if op == "further_spec":
        mods = role_spans(p1.roles, {"MOD"})
        if not mods:
            return None
        start, end = mods[0]
        if start > 0 and p1.tokens[start - 1] == "to":
            start -= 1
        return p2.tokens + p1.tokens[start:end]
    if op == "conjunction":
        len1, len2 = len(p1.tokens), len(p2.tokens)
        pre = 0
        while pre < min(len1, len2) and p1.tokens[pre] == p2.tokens[pre]:
            pre += 1
        suf = 0
        while (suf < min(len1, len2) - pre
               and p1.tokens[len1 - 1 - suf] == p2.tokens[len2 - 1 - suf]):
            suf += 1
        mid1, mid2 = p1.tokens[pre:len1 - suf], p2.tokens[pre:len2 - suf]
        if not mid1 and not mid2:
            return None
        return p2.tokens[:pre] + mid2 + ["and"] + mid1 + p2.tokens[len2 - suf:]
    raise ContractError(f"unknown operation {op!r}")


def inference_fixture_corpus(instances: list[InferenceInstance]) -> list[AnnotatedSentence]:
    """Deduplicated premises and conclusions, suitable for memorization training."""
    seen: set[str] = set()
    corpus: list[AnnotatedSentence] = []
    for inst in instances:
        for sent in (inst.premise1, inst.premise2, inst.conclusion):
            key = sent.text()
            if key not in seen:
                seen.add(key)
                corpus.append(sent)
    return corpus


# -- math expressions ---------------------------------------------------------

MATH_SPLITS = ("EVAL", "VAR", "EASY", "EQ", "LEN")
TRAIN_VARIABLES = ("x", "y", "z", "u", "v", "w", "n", "m")
NOVEL_VARIABLES = ("alpha", "beta", "gamma", "delta", "theta", "lambda", "phi", "omega")
MATH_FUNCTIONS = ("cos", "sin", "log", "exp")
MATH_OPERATORS = ("+", "-", "*")
TRAIN_MIN_VARS, TRAIN_MAX_VARS = 2, 4


@dataclass
class MathExpression:
    tokens: list[str]
    split_tag: str
    variables: set[str] = field(default_factory=set)
    depth: int = 0

    def __post_init__(self):
        if self.split_tag not in MATH_SPLITS:
            raise ContractError(f"unknown split {self.split_tag!r}")
        if self.tokens.count("(") != self.tokens.count(")"):
            raise ContractError("unbalanced delimiters")

    def text(self) -> str:
        return " ".join(self.tokens)


def _sample_expression(rng, variables, n_vars):
    """Chain of terms, each a bare variable or unary function application."""
    order = rng.permutation(len(variables))[:n_vars]
    tokens: list[str] = []
    used: set[str] = set()
    depth = 0
    for i, vi in enumerate(order):
        var = variables[int(vi)]
        used.add(var)
        if i > 0:
            tokens.append(MATH_OPERATORS[int(rng.integers(len(MATH_OPERATORS)))])
        if rng.random() < 0.5:
            fn = MATH_FUNCTIONS[int(rng.integers(len(MATH_FUNCTIONS)))]
            tokens.extend([fn, "(", var, ")"])
            depth = max(depth, 2)
        else:
            tokens.append(var)
            depth = max(depth, 1)
    if n_vars > 1:
        depth += 1
    return tokens, used, depth


def generate_math(seed: int, count: int, split: str) -> list[MathExpression]:
    """Expressions for one evaluation split.

    EVAL matches the training distribution; VAR swaps in unseen variable
    names; EASY uses strictly fewer variables than training ever does; EQ
    prefixes a training-shaped expression with "<var> ="; LEN uses strictly
    more variables than the training maximum.
    """
    if split not in MATH_SPLITS:
        raise ContractError(f"unknown split {split!r}; expected one of {MATH_SPLITS}")
    if count <= 0:
        raise ContractError(f"count must be positive, got {count}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        if split == "EASY":
            tokens, used, depth = _sample_expression(rng, TRAIN_VARIABLES, 1)
        elif split == "LEN":
            n = int(rng.integers(TRAIN_MAX_VARS + 1, TRAIN_MAX_VARS + 4))
            tokens, used, depth = _sample_expression(rng, TRAIN_VARIABLES, n)
        elif split == "VAR":
            n = int(rng.integers(TRAIN_MIN_VARS, TRAIN_MAX_VARS + 1))
            tokens, used, depth = _sample_expression(rng, NOVEL_VARIABLES, n)
        else:
            n = int(rng.integers(TRAIN_MIN_VARS, TRAIN_MAX_VARS + 1))
            tokens, used, depth = _sample_expression(rng, TRAIN_VARIABLES, n)
            if split == "EQ":
                lhs = TRAIN_VARIABLES[int(rng.integers(len(TRAIN_VARIABLES)))]
                tokens = [lhs, "="] + tokens
                used = used | {lhs}
                depth += 1
        out.append(MathExpression(tokens, split, used, depth))
    return out


# -- vocabulary and tokenization ----------------------------------------------


class Vocabulary:
    """Word-id bijection with four reserved specials."""

    PAD, START, END, UNK = 0, 1, 2, 3
    SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")

    def __init__(self, words: list[str]):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ContractError("vocabulary words must be unique")
        if any(w in self.SPECIALS for w in self.words):
            raise ContractError("special markers cannot appear as words")
        self._word_to_id = {w: i + len(self.SPECIALS) for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words) + len(self.SPECIALS)

    def id_of(self, word: str) -> int:
        return self._word_to_id.get(word, self.UNK)

    def word_of(self, idx: int) -> str:
        if idx < len(self.SPECIALS):
            return self.SPECIALS[idx]
        return self.words[idx - len(self.SPECIALS)]

    def __contains__(self, word: str) -> bool:
        return word in self._word_to_id


def build_vocab(token_lists: list[list[str]]) -> Vocabulary:
    """Sorted vocabulary over every word observed in the inputs."""
    words = sorted({tok for toks in token_lists for tok in toks})
    return Vocabulary(words)


def full_grammar_vocab() -> Vocabulary:
    """Vocabulary covering every word any grammar template can emit."""
    words = set()
    words.update(SPECIFIC_NOUNS, MIDDLE_NOUNS, RESOURCES, PURPOSES, EVENTS, EFFECTS,
                 INTRANSITIVES, ABILITY_VERBS)
    for pair in VERB_SYNONYMS:
        words.update(pair)
    for general in MIDDLE_TO_GENERAL.values():
        words.update(general)
    words.update(["a", "is", "not", "kind", "of", "requires", "to", "causes", "means",
                  "if", "then", "can", "and"])
    return Vocabulary(sorted(words))


def tokenize(text: str | list[str], vocab: Vocabulary) -> list[int]:
    """Ids bracketed by start/end; unknown words map to the unk id."""
    words = text.split() if isinstance(text, str) else list(text)
    return [vocab.START] + [vocab.id_of(w) for w in words] + [vocab.END]


def detokenize(ids: list[int], vocab: Vocabulary) -> str:
    """Inverse of tokenize on known words; specials are dropped."""
    n = len(vocab)
    for i in ids:
        if not 0 <= i < n:
            raise InputError(f"id {i} outside vocabulary of size {n}")
    words = [vocab.word_of(i) for i in ids if i >= len(Vocabulary.SPECIALS)]
    return " ".join(words)


# -- file formats ---------------------------------------------------------------


def format_annotated(sentence: AnnotatedSentence) -> str:
    return " ".join(f"{t}/{r}" for t, r in zip(sentence.tokens, sentence.roles))


def parse_annotated(line: str) -> AnnotatedSentence:
    tokens, roles = [], []
    for piece in line.split():
        if "/" not in piece:
            raise InputError(f"malformed token/ROLE pair {piece!r}")
        tok, role = piece.rsplit("/", 1)
        tokens.append(tok)
        roles.append(role)
    return AnnotatedSentence(tokens, roles, "loaded", infer_topic(tokens))


def save_corpus(path, sentences: list[AnnotatedSentence]) -> None:
    from .reports import atomic_write_text
    atomic_write_text(path, "".join(format_annotated(s) + "\n" for s in sentences))


def load_corpus(path) -> list[AnnotatedSentence]:
    with open(path, encoding="utf-8") as fh:
        return [parse_annotated(line) for line in fh if line.strip()]


def save_math_corpus(path, expressions: list[MathExpression]) -> None:
    from .reports import atomic_write_text
    atomic_write_text(path, "".join(f"{e.text()}\t{e.split_tag}\n" for e in expressions))


def load_math_corpus(path) -> list[MathExpression]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            text, _, tag = line.rstrip("\n").partition("\t")
            tokens = text.split()
            out.append(MathExpression(tokens, tag or "EVAL",
                                      {t for t in tokens if t.isalpha() and t not in MATH_FUNCTIONS},
                                      0))
    return out


def save_vocab(path, vocab: Vocabulary) -> None:
    from .reports import atomic_write_text
    atomic_write_text(path, "".join(w + "\n" for w in vocab.words))


def load_vocab(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        return Vocabulary([line.rstrip("\n") for line in fh if line.strip()])
