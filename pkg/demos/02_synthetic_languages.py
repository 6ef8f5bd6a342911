"""Topic-model corpora, cipher languages and the BEIR directory layout."""

# %%
import tempfile
from pathlib import Path

from crossdistill import synth
from crossdistill.retrieval import BagOfWords, evaluate, random_baseline_ndcg

topics = synth.build_topic_model(num_topics=8, vocab_size=2000, seed=0)
print("topic 0 head words:", topics.head_words(0)[:6])

data = synth.generate_dataset(topics, num_docs=200, num_queries=40, doc_len=64, query_len=8, seed=1)
qid, query = data.queries[0]
print(f"{qid}: {query!r}, {len(data.relevant()[qid])} relevant docs")

# %% A cipher language is a bijection over the word list; language 0 is the identity.
cipher = synth.make_cipher(topics.words, lang_id=2, seed=0)
print(query, "->", cipher.encode(query))
translated = synth.translate(data, cipher)
assert synth.translate(translated, cipher.inverse()) == data

# %% Round trip through corpus.jsonl / queries.jsonl / qrels/test.tsv.
with tempfile.TemporaryDirectory() as tmp:
    synth.write_beir(translated, Path(tmp) / "lang_2")
    assert synth.read_beir(Path(tmp) / "lang_2") == translated
    print((Path(tmp) / "lang_2" / "qrels" / "test.tsv").read_text().splitlines()[:3])

# %% Lexical matching works inside a language, and far beats random ranking.
bow = BagOfWords([text for _, _, text in data.corpus])
ndcg = evaluate(bow, {0: data}).results["synthetic"]["lang_0"]["ndcg@10"]
mean, se = random_baseline_ndcg(data, k=10, trials=1000, seed=0)
print(f"bag of words NDCG@10 {ndcg:.3f}, random {mean:.3f} +- {se:.3f}")
