#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "aelab/checkpoint.hpp"
#include "aelab/cli.hpp"
#include "aelab/errors.hpp"
#include "aelab/evaluator.hpp"
#include "aelab/trainer.hpp"

namespace py = pybind11;
using namespace aelab;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  FloatArray out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

/// Python-side owner of a float32 model.
struct Model {
  std::shared_ptr<Autoencoder<float>> impl;

  const ModelSpec& spec() const { return impl->spec(); }
};

Model load(const std::filesystem::path& path) {
  auto loaded = load_checkpoint(path);
  return Model{std::shared_ptr<Autoencoder<float>>(std::move(loaded.model))};
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Autoencoder reconstruction lab: models, training, evaluation and the rating study.";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_RuntimeError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);
  py::register_exception<TrainingError>(m, "TrainingError", PyExc_RuntimeError);
  py::register_exception<NotFoundError>(m, "NotFoundError", PyExc_LookupError);
  py::register_exception<ConflictError>(m, "ConflictError", PyExc_RuntimeError);

  py::enum_<ModelFamily>(m, "ModelFamily")
      .value("FEEDFORWARD", ModelFamily::kFeedforward)
      .value("CONVOLUTIONAL", ModelFamily::kConvolutional)
      .value("DIFFUSION", ModelFamily::kDiffusion);
  m.def("family_name", &family_name);
  m.def("parse_family", [](const std::string& s) { return parse_family(s); });

  py::enum_<InitScheme>(m, "InitScheme")
      .value("FAN_IN_UNIFORM", InitScheme::kFanInUniform)
      .value("HE_UNIFORM", InitScheme::kHeUniform);

  py::class_<DiffusionSettings>(m, "DiffusionSettings")
      .def(py::init<>())
      .def_readwrite("timesteps", &DiffusionSettings::timesteps)
      .def_readwrite("beta_start", &DiffusionSettings::beta_start)
      .def_readwrite("beta_end", &DiffusionSettings::beta_end)
      .def_readwrite("denoiser_width", &DiffusionSettings::denoiser_width)
      .def_readwrite("extra_blocks", &DiffusionSettings::extra_blocks)
      .def_readwrite("time_features", &DiffusionSettings::time_features);

  py::class_<ModelSpec>(m, "ModelSpec")
      .def(py::init<>())
      .def_static("defaults", &ModelSpec::defaults, py::arg("family"), py::arg("height") = 200,
                  py::arg("width") = 200)
      .def_readwrite("family", &ModelSpec::family)
      .def_readwrite("channels", &ModelSpec::channels)
      .def_readwrite("height", &ModelSpec::height)
      .def_readwrite("width", &ModelSpec::width)
      .def_readwrite("latent_dim", &ModelSpec::latent_dim)
      .def_readwrite("hidden", &ModelSpec::hidden)
      .def_readwrite("channel_chain", &ModelSpec::channel_chain)
      .def_readwrite("diffusion", &ModelSpec::diffusion)
      .def_readwrite("init", &ModelSpec::init)
      .def("validate", &ModelSpec::validate)
      .def("encoded_features", &ModelSpec::encoded_features)
      .def("to_json", [](const ModelSpec& s) { return spec_to_json(s); })
      .def_static("from_json", &spec_from_json)
      .def("__eq__", [](const ModelSpec& a, const ModelSpec& b) { return a == b; });

  py::class_<Model>(m, "Model")
      .def_property_readonly("spec", &Model::spec, py::return_value_policy::copy)
      .def("reconstruct",
           [](const Model& model, const FloatArray& x) {
             Tensor out;
             {
               const auto in = to_tensor(x);
               py::gil_scoped_release release;
               out = model.impl->reconstruct(in);
             }
             return to_array(out);
           },
           py::arg("x"), "Deterministic reconstruction of a C×H×W or B×C×H×W float array.")
      .def("parameter_count", [](const Model& model) { return count_parameters(*model.impl); })
      .def("parameters",
           [](const Model& model) {
             py::dict out;
             for (const auto& p : model.impl->parameters()) out[py::str(p.name)] = to_array(p.tensor);
             return out;
           })
      .def("save",
           [](const Model& model, const std::filesystem::path& path, int epoch, double train_loss,
              std::uint64_t seed) { save_checkpoint(*model.impl, CheckpointMeta{epoch, train_loss, seed}, path); },
           py::arg("path"), py::arg("epoch") = 0, py::arg("train_loss") = 0.0, py::arg("seed") = 0);

  m.def(
      "build_model",
      [](const ModelSpec& spec, std::uint64_t seed) {
        Rng rng(seed);
        return Model{std::shared_ptr<Autoencoder<float>>(build_model<float>(spec, rng))};
      },
      py::arg("spec"), py::arg("seed") = 0);
  m.def("load_checkpoint", &load, py::arg("path"));

  // dataset
  py::class_<DatasetIndex>(m, "DatasetIndex")
      .def_readonly("root", &DatasetIndex::root)
      .def_readonly("classes", &DatasetIndex::classes)
      .def_readonly("warnings", &DatasetIndex::warnings)
      .def("__len__", &DatasetIndex::size)
      .def("paths",
           [](const DatasetIndex& index) {
             std::vector<std::string> out;
             for (const auto& item : index.items) out.push_back(item.path);
             return out;
           })
      .def("class_ids", [](const DatasetIndex& index) {
        std::vector<std::size_t> out;
        for (const auto& item : index.items) out.push_back(item.class_id);
        return out;
      });
  py::class_<Split>(m, "Split")
      .def_readonly("train", &Split::train)
      .def_readonly("val", &Split::val)
      .def_readonly("seed", &Split::seed)
      .def_readonly("ratio", &Split::ratio);
  m.def("scan", &scan, py::arg("root"), py::arg("per_class_cap") = std::nullopt);
  m.def("split", &split, py::arg("index"), py::arg("ratio") = 0.2, py::arg("seed") = 0);
  m.def("write_split_manifest", &write_split_manifest, py::arg("path"), py::arg("index"), py::arg("split"));
  m.def("read_split_manifest", &read_split_manifest, py::arg("path"), py::arg("index"));
  m.def(
      "load_batch",
      [](const DatasetIndex& index, const std::vector<std::size_t>& items, std::size_t height, std::size_t width) {
        return to_array(load_batch(index, items, height, width).images);
      },
      py::arg("index"), py::arg("items"), py::arg("height"), py::arg("width"));
  m.def(
      "make_synthetic",
      [](const std::filesystem::path& root, std::size_t classes, std::size_t per_class, std::size_t size,
         std::uint64_t seed) { make_synthetic(root, SyntheticOptions{classes, per_class, size, seed}); },
      py::arg("root"), py::arg("classes") = 29, py::arg("per_class") = 20, py::arg("size") = 32, py::arg("seed") = 0);

  // training
  py::class_<LossWeights>(m, "LossWeights")
      .def(py::init<>())
      .def_readwrite("noise", &LossWeights::noise)
      .def_readwrite("kl", &LossWeights::kl);
  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("spec", &TrainConfig::spec)
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("seed", &TrainConfig::seed)
      .def_readwrite("weights", &TrainConfig::weights)
      .def_readwrite("data_root", &TrainConfig::data_root)
      .def_readwrite("per_class_cap", &TrainConfig::per_class_cap)
      .def_readwrite("split_ratio", &TrainConfig::split_ratio)
      .def_readwrite("split_manifest", &TrainConfig::split_manifest)
      .def_readwrite("output_dir", &TrainConfig::output_dir)
      .def("validate", &TrainConfig::validate);
  py::class_<EpochRecord>(m, "EpochRecord")
      .def_readonly("epoch", &EpochRecord::epoch)
      .def_readonly("train_loss", &EpochRecord::train_loss)
      .def_readonly("val_mse", &EpochRecord::val_mse)
      .def("__repr__", [](const EpochRecord& r) {
        std::ostringstream s;
        s << "EpochRecord(epoch=" << r.epoch << ", train_loss=" << r.train_loss << ", val_mse=" << r.val_mse << ")";
        return s.str();
      });
  m.def(
      "train",
      [](const TrainConfig& config, const std::function<void(const EpochRecord&)>& on_epoch) {
        TrainHooks hooks;
        if (on_epoch) {
          hooks.on_epoch = [&on_epoch](const EpochRecord& r) {
            py::gil_scoped_acquire acquire;
            on_epoch(r);
          };
        }
        TrainResult result;
        {
          py::gil_scoped_release release;
          result = train(config, hooks);
        }
        py::dict out;
        out["model"] = Model{std::shared_ptr<Autoencoder<float>>(std::move(result.model))};
        out["history"] = result.history;
        out["split"] = result.split;
        out["checkpoint"] = result.checkpoint;
        return out;
      },
      py::arg("config"), py::arg("on_epoch") = nullptr,
      "Trains one model. Returns a dict with model, history, split and checkpoint.");

  // evaluation
  py::class_<ClassMse>(m, "ClassMse")
      .def_readonly("class_name", &ClassMse::class_name)
      .def_readonly("n", &ClassMse::n)
      .def_readonly("mean_mse", &ClassMse::mean_mse);
  py::class_<EvalReport>(m, "EvalReport")
      .def_readonly("model", &EvalReport::model)
      .def_readonly("n_images", &EvalReport::n_images)
      .def_readonly("mean_mse", &EvalReport::mean_mse)
      .def_readonly("per_class", &EvalReport::per_class);
  m.def(
      "evaluate_mse",
      [](const Model& model, const DatasetIndex& index, const Split& split, std::size_t batch_size) {
        py::gil_scoped_release release;
        return evaluate_mse(*model.impl, index, split, batch_size);
      },
      py::arg("model"), py::arg("index"), py::arg("split"), py::arg("batch_size") = 32);
  m.def(
      "per_image_mse",
      [](const FloatArray& x, const FloatArray& y) { return per_image_mse(to_tensor(x), to_tensor(y)); },
      py::arg("x"), py::arg("y"));
  m.def(
      "export_reconstructions",
      [](const std::map<std::string, Model>& models, const DatasetIndex& index, const std::vector<std::size_t>& items,
         const std::filesystem::path& out_dir, std::uint64_t seed) {
        std::vector<NamedModel> named;
        for (const auto& [id, model] : models) named.push_back({id, model.impl.get()});
        return export_reconstructions(named, index, items, out_dir, seed).entries.size();
      },
      py::arg("models"), py::arg("index"), py::arg("items"), py::arg("out_dir"), py::arg("seed") = 0,
      "Writes <out_dir>/img/<opaque>.png and manifest.json; returns the number of images.");

  // rating study
  py::class_<RatingItem>(m, "RatingItem")
      .def_readonly("item_id", &RatingItem::item_id)
      .def_readonly("image_file", &RatingItem::image_file)
      .def_readonly("model", &RatingItem::model)
      .def_readonly("class_label", &RatingItem::class_label)
      .def_readonly("original_file", &RatingItem::original_file);
  py::class_<RatingRecord>(m, "RatingRecord")
      .def(py::init([](std::string session, std::string rater, std::string item, int rating, std::string ts) {
             return RatingRecord{std::move(session), std::move(rater), std::move(item), rating, std::move(ts)};
           }),
           py::arg("session_id"), py::arg("rater_id"), py::arg("item_id"), py::arg("rating"),
           py::arg("timestamp") = "")
      .def_readonly("session_id", &RatingRecord::session_id)
      .def_readonly("rater_id", &RatingRecord::rater_id)
      .def_readonly("item_id", &RatingRecord::item_id)
      .def_readonly("rating", &RatingRecord::rating)
      .def_readonly("timestamp", &RatingRecord::timestamp)
      .def("to_json", [](const RatingRecord& r) { return rating_record_json(r); });
  py::class_<ModelMos>(m, "ModelMos")
      .def_readonly("model", &ModelMos::model)
      .def_readonly("mean", &ModelMos::mean)
      .def_readonly("count", &ModelMos::count)
      .def_readonly("histogram", &ModelMos::histogram);
  py::class_<MosReport>(m, "MosReport")
      .def_readonly("models", &MosReport::models)
      .def("to_json", [](const MosReport& r) { return mos_report_json(r); })
      .def("table", [](const MosReport& r) { return format_mos_table(r); })
      .def("__eq__", [](const MosReport& a, const MosReport& b) { return a == b; });
  m.def("rating_items_from_export", [](const std::filesystem::path& dir) { return rating_items(read_export_manifest(dir)); },
        py::arg("export_dir"));
  m.def("read_rating_log", &read_rating_log, py::arg("path"));
  m.def(
      "compute_mos",
      [](const std::vector<RatingRecord>& records, const std::vector<RatingItem>& items) {
        return compute_mos(records, items);
      },
      py::arg("records"), py::arg("items"));

  py::class_<RatingService>(m, "RatingService")
      .def(py::init([](std::vector<RatingItem> items, std::filesystem::path log, std::uint64_t seed,
                       std::optional<std::size_t> items_per_session) {
             return std::make_unique<RatingService>(std::move(items), std::move(log),
                                                    RatingServiceOptions{seed, items_per_session, {}});
           }),
           py::arg("items"), py::arg("log_path"), py::arg("seed") = 0, py::arg("items_per_session") = std::nullopt)
      .def("create_session", &RatingService::create_session, py::arg("rater_id") = "")
      .def("schedule_next",
           [](RatingService& s, const std::string& session) -> py::dict {
             const auto next = s.schedule_next(session);
             py::dict out;
             if (next.exhausted) {
               out["exhausted"] = true;
             } else {
               out["item_id"] = next.item_id;
               out["image_url"] = next.image_url;
               out["original_url"] = next.original_url;
             }
             out["rated"] = next.rated;
             out["total"] = next.total;
             return out;
           })
      .def("record_rating", &RatingService::record_rating, py::arg("session_id"), py::arg("item_id"),
           py::arg("rating"))
      .def("report", &RatingService::report);

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv = {"aelab"};
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("args"), "Runs one aelab subcommand; returns (exit_code, stdout, stderr).");
}
