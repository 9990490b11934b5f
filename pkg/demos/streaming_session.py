"""A simulated streaming session with LocalAgreement.

Runs a scripted transcriber over one synthetic utterance, once clean and
once with injected errors, and prints the event log and the metrics.
"""

from fractions import Fraction

import numpy as np

from streamasr.dataset import synth_utterance
from streamasr.metrics import count_corrections, session_report
from streamasr.streaming import AudioStream, SessionConfig, run_session
from streamasr.transcribers import ScriptedTranscriber

fps = Fraction(10)
frames, ref = synth_utterance(np.random.default_rng(1), 8, fps, 16, 0.1)
stream = AudioStream(frames, fps)
cfg = SessionConfig(inference_interval=0.5, window_len=30.0, processing_latency_model=0.1)
print("reference:", " ".join(ref.texts))

clean = run_session(stream, ScriptedTranscriber(ref, stream.total_duration), cfg)
for ev in clean.events[:6]:
    print(f"  t={ev.emit_time:5.2f} {ev.kind.value:10} #{ev.word_index} {ev.word}")
rep = session_report(clean, ref)
print(f"clean: WER {rep.wer.wer:.3f}, mean hypothesis latency {rep.hypothesis_latency.mean:.3f}s, "
      f"confirmed {rep.confirmed_latency.mean:.3f}s")

noisy_tr = ScriptedTranscriber(ref, stream.total_duration, p_sub=0.3, p_del=0.2, p_ins=0.2, seed=4)
noisy = run_session(stream, noisy_tr, cfg)
print("injected:", noisy_tr.applied_counts())
print("corrections seen:", count_corrections(noisy.buffers).to_dict())
print("final transcript:", " ".join(noisy.final_transcript))
