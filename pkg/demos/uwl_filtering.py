"""
Keep only training triples whose context actually helps
=======================================================

"""

from hef.uwl import UwlPair, filter_pairs, fit_lm, uwl_score

# a frozen 5-gram model over a toy corpus of token streams
corpus = [
    "item = pick ( cart ) price = lookup ( item ) total = price * qty",
    "price = lookup ( item ) total = price * qty",
    "qty = count ( cart ) total = qty * rate",
    "qty = count ( cart ) total = qty * rate",
]
lm = fit_lm(corpus, order=5, add_k=0.5)
print("vocabulary size", lm.vocab_size)

# the context goes in front of the prefix; the 4-token window sees its last
# two tokens, so "item )" points at price while "cart )" points at qty
prefix, completion = "total =", "price"
for context in ["", "price = lookup ( item )", "qty = count ( cart )", "lookup lookup"]:
    rec = uwl_score(lm, prefix, context, completion)
    print(f"{context!r:28} delta {rec.delta:+.3f}  score {rec.uwl:.3f}  kept {rec.kept}")

# filtering a batch keeps input order and reports every score
contexts = ["", "price = lookup ( item )", "qty = count ( cart )"]
pairs = [UwlPair(prefix, c, completion, prefix_id=str(i)) for i, c in enumerate(contexts)]
kept, records = filter_pairs(pairs, lm)
print("kept", [p.prefix_id for p in kept], "deltas", [round(r.delta, 3) for r in records])
