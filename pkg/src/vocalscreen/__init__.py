"""Speaker-level screening from stratified samples of spectrogram fragments.

The package turns a manifest of labelled speech recordings into
subject-level probabilities: recordings are decoded and resampled to a
common rate, converted to log-mel spectrograms, cut into heavily
overlapping fragments, and a small bag of fragments per speaker is fed
through a convolutional (optionally recurrent) encoder with a dense
scoring head.  Cross-validated grid search, threshold analysis and
feature clustering live in their own modules.
"""

__version__ = "0.1.0"
