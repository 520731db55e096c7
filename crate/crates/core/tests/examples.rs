//! Every example under `examples/` runs to completion.

macro_rules! example {
    ($test:ident, $module:ident, $file:literal) => {
        #[allow(dead_code)]
        #[path = $file]
        mod $module;

        #[test]
        fn $test() {
            $module::run_example().expect(concat!($file, " should run"));
        }
    };
}

example!(parse_and_serialize_runs, parse_and_serialize, "../examples/parse_and_serialize.rs");
example!(grade_answers_runs, grade_answers, "../examples/grade_answers.rs");
example!(compose_teachers_runs, compose_teachers, "../examples/compose_teachers.rs");
example!(curate_problems_runs, curate_problems, "../examples/curate_problems.rs");
example!(self_distill_runs, self_distill, "../examples/self_distill.rs");
example!(loss_masks_runs, loss_masks, "../examples/loss_masks.rs");
example!(tool_loop_eval_runs, tool_loop_eval, "../examples/tool_loop_eval.rs");
example!(http_policy_runs, http_policy, "../examples/http_policy.rs");
example!(full_pipeline_runs, full_pipeline, "../examples/full_pipeline.rs");
