//! Temperature-softened targets and the three distillation losses.

use dcsnet::distill::{hard_loss, soft_loss, soften, total_loss, DistillConfig};
use dcsnet::Tensor;

fn main() -> dcsnet::Result<()> {
    let teacher = Tensor::new(vec![1, 3], vec![6.0f64, 2.0, -1.0])?;
    let student = Tensor::new(vec![1, 3], vec![3.0f64, 2.5, 0.0])?;
    for t in [1.0, 4.0, 10.0, 20.0] {
        println!("T={t:<4} teacher soft targets {:?}", soften(&teacher, t)?.data());
    }
    let cfg = DistillConfig::default();
    let hard = hard_loss(&soften(&student, 1.0)?, &[0])?;
    let soft = soft_loss(&teacher, &student, &cfg)?;
    let total = total_loss(hard, soft, cfg.alpha)?;
    println!("hard {hard:.4}, soft {soft:.4}, total (alpha {}) {total:.4}", cfg.alpha);
    Ok(())
}
