pub mod eval_cmd;
pub mod gen_data;
pub mod infer_cmd;
pub mod match_cmd;
pub mod sparsify_cmd;
pub mod theory_cmd;
pub mod train_cmd;
