"""How the composed student lays out its input and why fresh LoRA changes nothing."""

# %%
import numpy as np

from crossdistill.composition import ComposedStudent, TeacherModel
from crossdistill.encoder import EncoderConfig, LoraAdapters, LoraConfig, TransformerEncoder, trainable_parameters
from crossdistill.tokenization import build_multilingual_vocab, build_teacher_vocab

texts = ["ba ko mi", "lu ta ko", "mi ba lu"]
teacher_vocab = build_teacher_vocab(texts)
ml_vocab = build_multilingual_vocab(texts + ["l1_ab l1_ok"], num_languages=2)

teacher = TeacherModel(TransformerEncoder(EncoderConfig(len(teacher_vocab), d_model=16, num_heads=2, d_ff=32)),
                       teacher_vocab)
multilingual = TransformerEncoder(EncoderConfig(len(ml_vocab), d_model=12, num_heads=2, d_ff=24), seed=1)
lora = LoraAdapters(LoraConfig(rank=4, alpha=8.0), d_model=16, num_layers=2)
student = ComposedStudent.assemble(multilingual, ml_vocab, teacher, lora, d_hidden=32)

# %% The head sees [CLS] query : | projected states | [SEP]; [BOS] and [EOS] are masked out.
batch = student.encode_multilingual(["ba ko mi", "lu"], lang_ids=0)
index, mask = student.layout(batch.seqs, "query")
print("gather index\n", index)
print("head mask\n", mask)
print("multilingual budget with 512 head positions:", 512 - 4)

# %% Only the projection and the adapters train.
print([name for name, _ in trainable_parameters(student)])

# %% B starts at zero, so the adapted head equals the frozen one.
a = student.embed_hidden(batch, "query").data
b = student.embed_hidden(batch, "query", use_lora=False).data
print("max |LoRA - base| at init:", np.abs(a - b).max())
