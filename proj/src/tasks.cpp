#include "rtcl/tasks.hpp"

#include <algorithm>
#include <numeric>

namespace rtcl {

std::vector<TaskSpec> make_splits(const Dataset& train, const Dataset& test,
                                  const std::vector<int>& classes, int n_tasks, Rng& rng) {
    if (n_tasks < 1) throw ConfigError("split stream needs at least one task");
    if (classes.empty() || static_cast<int>(classes.size()) % n_tasks != 0) {
        throw ConfigError(std::to_string(classes.size()) + " classes cannot split into " +
                          std::to_string(n_tasks) + " equal tasks");
    }
    std::vector<int> shuffled = classes;
    rng.shuffle(shuffled);
    const int per_task = static_cast<int>(classes.size()) / n_tasks;
    std::vector<TaskSpec> specs;
    for (int t = 0; t < n_tasks; ++t) {
        TaskSpec spec;
        spec.id = t;
        spec.mode = TaskMode::Split;
        spec.class_ids.assign(shuffled.begin() + static_cast<std::ptrdiff_t>(t) * per_task,
                              shuffled.begin() + static_cast<std::ptrdiff_t>(t + 1) * per_task);
        std::sort(spec.class_ids.begin(), spec.class_ids.end());
        spec.train_idx = train.indices_of(spec.class_ids);
        spec.test_idx = test.indices_of(spec.class_ids);
        specs.push_back(std::move(spec));
    }
    return specs;
}

std::vector<int> random_permutation(int n, Rng& rng) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm);
    return perm;
}

std::vector<TaskSpec> make_permutations(const Dataset& train, const Dataset& test, int n_tasks,
                                        bool first_identity, Rng& rng) {
    if (n_tasks < 1) throw ConfigError("permutation stream needs at least one task");
    const int pixels = train.h * train.w * train.c;
    std::vector<int> all_train(train.size());
    std::iota(all_train.begin(), all_train.end(), 0);
    std::vector<int> all_test(test.size());
    std::iota(all_test.begin(), all_test.end(), 0);
    const std::vector<int> classes = train.classes();

    std::vector<TaskSpec> specs;
    for (int t = 0; t < n_tasks; ++t) {
        TaskSpec spec;
        spec.id = t;
        spec.mode = TaskMode::Permutation;
        spec.class_ids = classes;
        if (!(t == 0 && first_identity)) {
            spec.perm = random_permutation(pixels, rng);
        }
        spec.train_idx = all_train;
        spec.test_idx = all_test;
        specs.push_back(std::move(spec));
    }
    return specs;
}

}  // namespace rtcl
