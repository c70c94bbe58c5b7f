fn main() {
    println!("paadet");
}
