#pragma once

// Duration-weighted accuracy and per-class F1, dataset reports, and the
// run-length activity timeline.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cad/data.hpp"
#include "cad/model.hpp"
#include "cad/parallel.hpp"

namespace cad {

/// w_i = duration_i / total duration.
inline std::vector<double> duration_weights(std::span<const double> durations) {
  double total = 0.0;
  for (double d : durations) {
    if (!(d > 0.0)) throw DataError("duration_weights: durations must be positive");
    total += d;
  }
  if (!(total > 0.0)) throw DataError("duration_weights: zero total duration");
  std::vector<double> w;
  w.reserve(durations.size());
  for (double d : durations) w.push_back(d / total);
  return w;
}

inline std::vector<double> duration_weights(const Recording& rec) {
  std::vector<double> d;
  d.reserve(rec.size());
  for (const Segment& s : rec.segments) d.push_back(double(s.duration_ms()));
  return duration_weights(d);
}

namespace detail {

inline void require_aligned(std::size_t a, std::size_t b, std::size_t c, const char* what) {
  if (a != b || a != c) {
    throw DimensionError(std::string(what) + ": length mismatch (" + std::to_string(a) + ", " +
                         std::to_string(b) + ", " + std::to_string(c) + ")");
  }
}

}  // namespace detail

inline double weighted_accuracy(std::span<const Label> predicted, std::span<const Label> gold,
                                std::span<const double> weights) {
  detail::require_aligned(predicted.size(), gold.size(), weights.size(), "weighted_accuracy");
  double acc = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i)
    if (predicted[i] == gold[i]) acc += weights[i];
  return acc;
}

/// F1 of one class from duration-weighted true/false positive and false
/// negative mass. Defined as 0 when precision + recall is 0, which includes a
/// class absent from both predictions and labels.
inline double weighted_f1(std::span<const Label> predicted, std::span<const Label> gold,
                          std::span<const double> weights, Label cls) {
  detail::require_aligned(predicted.size(), gold.size(), weights.size(), "weighted_f1");
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const bool p = predicted[i] == cls, g = gold[i] == cls;
    if (p && g) tp += weights[i];
    else if (p) fp += weights[i];
    else if (g) fn += weights[i];
  }
  const double precision = tp + fp > 0.0 ? tp / (tp + fp) : 0.0;
  const double recall = tp + fn > 0.0 ? tp / (tp + fn) : 0.0;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

struct RecordingMetrics {
  std::string id;
  double accuracy = 0.0;
  double f1_teacher = 0.0;
  double f1_student = 0.0;
  double predicted_student_share = 0.0;  // duration share
  double gold_student_share = 0.0;
};

enum class Aggregation { Macro, Pooled };

struct MetricsReport {
  std::vector<RecordingMetrics> recordings;
  Aggregation aggregation = Aggregation::Macro;
  double accuracy = 0.0;
  double f1_teacher = 0.0;
  double f1_student = 0.0;
  double predicted_student_share = 0.0;
  double gold_student_share = 0.0;
};

inline RecordingMetrics recording_metrics(const Recording& rec, std::span<const Label> predicted) {
  const std::vector<Label> gold = gold_labels(rec);
  const std::vector<double> w = duration_weights(rec);
  RecordingMetrics m;
  m.id = rec.id;
  m.accuracy = weighted_accuracy(predicted, gold, w);
  m.f1_teacher = weighted_f1(predicted, gold, w, Label::Teacher);
  m.f1_student = weighted_f1(predicted, gold, w, Label::Student);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (predicted[i] == Label::Student) m.predicted_student_share += w[i];
    if (gold[i] == Label::Student) m.gold_student_share += w[i];
  }
  return m;
}

/// Per-recording metrics plus the aggregate: an unweighted mean across
/// recordings (Macro) or one computation over all segments with weights
/// normalized by the dataset's total duration (Pooled).
inline MetricsReport summarize(const std::vector<Recording>& gold_recordings,
                               const std::vector<std::vector<Label>>& predictions,
                               Aggregation aggregation = Aggregation::Macro) {
  if (gold_recordings.empty()) throw DataError("evaluate: empty dataset");
  if (predictions.size() != gold_recordings.size()) {
    throw DimensionError("evaluate: one prediction vector per recording required");
  }
  MetricsReport report;
  report.aggregation = aggregation;
  for (std::size_t r = 0; r < gold_recordings.size(); ++r) {
    if (predictions[r].size() != gold_recordings[r].size()) {
      throw DimensionError("evaluate: prediction length mismatch for '" + gold_recordings[r].id +
                           "'");
    }
    report.recordings.push_back(recording_metrics(gold_recordings[r], predictions[r]));
  }

  if (aggregation == Aggregation::Macro) {
    const double inv = 1.0 / double(report.recordings.size());
    for (const RecordingMetrics& m : report.recordings) {
      report.accuracy += inv * m.accuracy;
      report.f1_teacher += inv * m.f1_teacher;
      report.f1_student += inv * m.f1_student;
      report.predicted_student_share += inv * m.predicted_student_share;
      report.gold_student_share += inv * m.gold_student_share;
    }
    return report;
  }

  std::vector<Label> pred, gold;
  std::vector<double> durations;
  for (std::size_t r = 0; r < gold_recordings.size(); ++r) {
    const auto g = gold_labels(gold_recordings[r]);
    gold.insert(gold.end(), g.begin(), g.end());
    pred.insert(pred.end(), predictions[r].begin(), predictions[r].end());
    for (const Segment& s : gold_recordings[r].segments) durations.push_back(double(s.duration_ms()));
  }
  const std::vector<double> w = duration_weights(durations);
  report.accuracy = weighted_accuracy(pred, gold, w);
  report.f1_teacher = weighted_f1(pred, gold, w, Label::Teacher);
  report.f1_student = weighted_f1(pred, gold, w, Label::Student);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (pred[i] == Label::Student) report.predicted_student_share += w[i];
    if (gold[i] == Label::Student) report.gold_student_share += w[i];
  }
  return report;
}

inline MetricsReport evaluate_dataset(const CadModel& model, const Dataset& ds,
                                      Aggregation aggregation = Aggregation::Macro,
                                      std::size_t threads = 1) {
  if (ds.recordings.empty()) throw DataError("evaluate: empty dataset");
  std::vector<std::vector<Label>> predictions(ds.recordings.size());
  parallel_for(ds.recordings.size(), threads, [&](std::size_t r) {
    predictions[r] = predict_labels(model, ds.recordings[r]);
  });
  return summarize(ds.recordings, predictions, aggregation);
}

inline Json to_json(const MetricsReport& r) {
  Json recs = Json::array();
  for (const RecordingMetrics& m : r.recordings) {
    recs.push_back({{"id", m.id},
                    {"accuracy", m.accuracy},
                    {"f1_teacher", m.f1_teacher},
                    {"f1_student", m.f1_student},
                    {"predicted_student_share", m.predicted_student_share},
                    {"gold_student_share", m.gold_student_share}});
  }
  return Json{{"aggregation", r.aggregation == Aggregation::Macro ? "macro" : "pooled"},
              {"accuracy", r.accuracy},
              {"f1_teacher", r.f1_teacher},
              {"f1_student", r.f1_student},
              {"predicted_student_share", r.predicted_student_share},
              {"predicted_teacher_share", 1.0 - r.predicted_student_share},
              {"gold_student_share", r.gold_student_share},
              {"recordings", recs}};
}

// ---------------------------------------------------------------------------
// Timeline
// ---------------------------------------------------------------------------

struct TimelineRun {
  std::int64_t start_ms = 0;
  std::int64_t end_ms = 0;
  std::int64_t talk_ms = 0;  // summed segment durations inside the run
  Label label = Label::Teacher;
  std::size_t segments = 0;
};

struct Timeline {
  std::string recording_id;
  std::vector<TimelineRun> runs;
  std::int64_t teacher_talk_ms = 0;
  std::int64_t student_talk_ms = 0;
};

/// Merges consecutive same-label segments into runs.
inline Timeline make_timeline(const Recording& rec) {
  if (rec.segments.empty()) throw DataError("timeline: recording '" + rec.id + "' has no segments");
  Timeline tl;
  tl.recording_id = rec.id;
  for (const Segment& s : rec.segments) {
    if (!s.label) {
      throw DataError("timeline: segment " + std::to_string(s.id) + " of '" + rec.id +
                      "' is unlabeled");
    }
    if (tl.runs.empty() || tl.runs.back().label != *s.label) {
      tl.runs.push_back(TimelineRun{s.start_ms, s.end_ms, 0, *s.label, 0});
    }
    TimelineRun& run = tl.runs.back();
    run.end_ms = std::max(run.end_ms, s.end_ms);
    run.talk_ms += s.duration_ms();
    run.segments += 1;
    (*s.label == Label::Teacher ? tl.teacher_talk_ms : tl.student_talk_ms) += s.duration_ms();
  }
  return tl;
}

inline Json to_json(const Timeline& tl) {
  Json runs = Json::array();
  for (const TimelineRun& r : tl.runs) {
    runs.push_back({{"start_ms", r.start_ms},
                    {"end_ms", r.end_ms},
                    {"talk_ms", r.talk_ms},
                    {"segments", r.segments},
                    {"label", label_name(r.label)}});
  }
  return Json{{"recording", tl.recording_id},
              {"runs", runs},
              {"talk_time_ms", {{"Teacher", tl.teacher_talk_ms}, {"Student", tl.student_talk_ms}}}};
}

inline Timeline emit_timeline(const Recording& labeled, const std::filesystem::path& path) {
  Timeline tl = make_timeline(labeled);
  write_text_file(path, to_json(tl).dump(2));
  return tl;
}

}  // namespace cad
